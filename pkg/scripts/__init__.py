"""Scripts d'expérience (hors package)."""

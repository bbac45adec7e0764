"""tpower-uap: perturbations universelles parcimonieuses par méthode de la puissance tronquée."""

__version__ = "0.1.0"

"""Point-cloud backdoor triggers, defenses and a minimal classifier."""

__version__ = "0.1.0"

"""Twin-prompt federated learning simulator (text + visual prompts, InfoNCE toward global prompts)."""

__version__ = "0.1.0"

"""Point-cloud regression of forest biomass and wood volume."""

__version__ = "0.1.0"

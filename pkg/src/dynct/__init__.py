"""Dynamic CT from time-sequential projections with neural fields and a learned restoration prior."""

__version__ = "0.1.0"

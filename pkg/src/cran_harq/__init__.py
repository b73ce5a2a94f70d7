"""Early HARQ feedback prediction for a two-RRH C-RAN uplink."""

__version__ = "0.1.0"

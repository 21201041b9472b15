"""Multi-destination frame aggregation over binary symmetric broadcast channels in 802.11 WLANs."""

__version__ = "0.1.0"

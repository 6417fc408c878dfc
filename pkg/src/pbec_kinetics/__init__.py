"""Rate-equation kinetics of a multimode photon condensate coupled to a dye reservoir."""

__version__ = "0.1.0"

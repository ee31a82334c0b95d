# Multi-scale McKean-Vlasov SDEs driven by fBm: sampling, averaging, skeleton and rate-function tools.
__version__ = "0.3.0"

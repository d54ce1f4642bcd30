"""PICS: phase imaging with computational specificity.

Reconstruct quantitative phase from four-frame interferograms, train a
U-Net to predict fluorescence-like stains from phase, segment the
predicted stains, and derive confluence/dry-mass growth curves from
time-lapse sequences.
"""

__version__ = "0.1.0"

CONFIG_SCHEMA_VERSION = 1

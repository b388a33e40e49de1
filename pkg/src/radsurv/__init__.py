"""Multimodal CT/PET radiomics and penalized survival modelling."""

__version__ = "0.1.0"

"""Carotid MAB/LIB segmentation lab: two-channel U-Net, adaptive triple Dice loss,
flip test-time augmentation and the evaluation stack, run on vessel phantoms."""

__version__ = "0.1.0"

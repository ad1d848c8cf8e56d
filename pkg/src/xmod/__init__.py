"""Unpaired CT-to-MR synthesis with a segmentation-constrained CycleGAN, plus
a downstream U-Net liver segmenter trained on real and synthetic slices."""

__version__ = "0.1.0"

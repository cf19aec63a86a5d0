"""Two-stage false-positive-reduction segmentation cascade for PET/CT volumes."""

__version__ = "0.1.0"

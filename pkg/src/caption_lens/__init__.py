"""Caption Lens - global enhanced transformer captioning from region features."""

__version__ = "0.1.0"
__author__ = "Michael Borck"
__description__ = "Caption lens - region-feature captioning with global enhanced attention, SCST and attribution"

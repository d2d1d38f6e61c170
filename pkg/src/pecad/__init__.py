"""Two-stage CT pulmonary angiography triage: an ensemble image classifier
with false-positive reduction, followed by lesion segmentation of flagged
slices."""

__version__ = "0.1.0"

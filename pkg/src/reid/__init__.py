"""Framework-free video re-identification engine: temporal attention pooling,
OSM / center / triplet / attention losses, and CMC / mAP / re-ranked evaluation."""

__version__ = "0.1.0"

"""Deep CNN image quality models (DIQaM / WaDIQaM, full- and no-reference)."""

__version__ = "0.1.0"

"""htlab: a desk-scale lab for adapting dense classifiers to a shifted
domain when the adaptation data covers only part of the label space."""

__version__ = "0.1.0"

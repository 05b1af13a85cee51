# Copyright (c) 2026, saml-pipeline contributors.

"""Lay-annotator cell segmentation: box prompts, pseudo-labels, corrective training."""

__version__ = "0.1.0"

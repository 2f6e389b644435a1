"""Multimodal image classification at desk scale.

Implements and compares fusion strategies for multi-modality image
classification: per-modality single networks, early fusion (channel
concatenation), late fusion (probability averaging), a multi-input
multi-output network with one head per modality, and the same network
trained with knowledge distillation from the late-fusion teachers.
"""

__version__ = "0.1.0"

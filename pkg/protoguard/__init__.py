"""
ProtoGuard: unsupervised detection of adversarial images.
"""

__version__ = "1.0.0"

"""Cross-domain GAN toolkit: four training regimes (single-domain, combined,
coupled with weight tying, and adversarial domain adaptation) plus
embedding-space nearest-neighbor search and episode retrieval."""

__version__ = "0.1.0"

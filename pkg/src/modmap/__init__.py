"""Map multimodal dataset instances to the modality subsets sufficient to solve them."""

__version__ = "0.1.0"

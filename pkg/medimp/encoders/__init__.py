from medimp.encoders.freeze import apply_freeze_policy, text_layer
from medimp.encoders.image import ImageEncoder, attention_pool_3d, encode_image, inflate_kernel
from medimp.encoders.params import ParameterStore
from medimp.encoders.text import TextEncoder, encode_text

__all__ = [
    "ImageEncoder",
    "ParameterStore",
    "TextEncoder",
    "apply_freeze_policy",
    "attention_pool_3d",
    "encode_image",
    "encode_text",
    "inflate_kernel",
    "text_layer",
]

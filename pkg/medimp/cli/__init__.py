from medimp.cli.checkpoint import decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint
from medimp.cli.export import export_embeddings, read_embeddings, write_embeddings
from medimp.cli.plotting import count_markers, render_scatter_svg
from medimp.cli.tsne import conditional_probabilities, joint_probabilities, tsne_2d

__all__ = [
    "conditional_probabilities",
    "count_markers",
    "decode_checkpoint",
    "encode_checkpoint",
    "export_embeddings",
    "joint_probabilities",
    "read_checkpoint",
    "read_embeddings",
    "render_scatter_svg",
    "tsne_2d",
    "write_checkpoint",
    "write_embeddings",
]

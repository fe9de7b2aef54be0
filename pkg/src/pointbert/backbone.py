"""Standard Transformer encoder over patch tokens with a class token."""

from dataclasses import dataclass

import numpy as np

from .neuralops import MiniPointNet, PositionalEmbedding, TransformerBlock, TransformerConfig
from .numcore import LayerNorm, Module, Tensor, concat, parameter, reshape, where
from .numcore.tensor import as_tensor, broadcast_to


@dataclass
class EmbeddingBundle:
    point_embeddings: Tensor  # (B, g, d)
    positional_embeddings: Tensor  # (B, g, d)
    class_token: Tensor  # (d,)
    mask_token: Tensor  # (d,)


def assemble_sequence(bundle, mask=None):
    """``[E_s, x_1 .. x_g]`` with masked ``x_i`` replaced by ``E_M + pos_i``.

    ``mask`` is a boolean (B, g) array; ``None`` or all-False leaves the
    point embeddings untouched.
    """
    f = as_tensor(bundle.point_embeddings)
    pos = as_tensor(bundle.positional_embeddings)
    bsz, g, d = f.shape
    if mask is not None and np.any(mask):
        f = where(np.asarray(mask, dtype=bool)[..., None], bundle.mask_token, f)
    x = f + pos
    cls = broadcast_to(reshape(bundle.class_token, (1, 1, d)), (bsz, 1, d))
    return concat([cls, x], axis=1)


class PointTransformer(Module):
    """Patch embedder + positional MLP + ``depth`` pre-norm blocks + final norm."""

    def __init__(self, cfg, rng, embed_dims=((32, 64), (64,)), pos_hidden=64):
        self.cfg = cfg
        d = cfg.model_dim
        self.embedder = MiniPointNet(d, rng, point_dims=embed_dims[0], head_dims=embed_dims[1])
        self.pos_embed = PositionalEmbedding(d, rng, hidden=pos_hidden)
        self.cls_token = parameter(rng.normal(0.0, 0.02, size=d))
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=d))
        rates = np.linspace(0.0, cfg.drop_path_rate, cfg.depth) if cfg.depth > 1 else [cfg.drop_path_rate]
        self.blocks = [TransformerBlock(cfg, rng, drop_path=float(r)) for r in rates]
        self.norm = LayerNorm(d)

    def embed(self, patches, centers):
        return EmbeddingBundle(
            point_embeddings=self.embedder(patches),
            positional_embeddings=self.pos_embed(centers),
            class_token=self.cls_token,
            mask_token=self.mask_token,
        )

    def encode(self, sequence, rng=None, return_layers=False):
        """Run the blocks; with ``return_layers`` also return every block output."""
        h = sequence
        layers = []
        for block in self.blocks:
            h = block(h, rng)
            layers.append(h)
        out = self.norm(h)
        return (out, layers) if return_layers else out

    def __call__(self, patches, centers, mask=None, rng=None, return_layers=False):
        seq = assemble_sequence(self.embed(patches, centers), mask)
        return self.encode(seq, rng, return_layers)


def global_feature(h):
    """``concat(h_cls, max_i h_i)`` from an encoder output of shape (B, g+1, d)."""
    return concat([h[:, 0, :], h[:, 1:, :].max(axis=1)], axis=-1)

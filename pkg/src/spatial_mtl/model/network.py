"""Toy-scale single-stream vision-language transformer with spatial decoders."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import autodiff as ad
from ..autodiff import LossBreakdown, LossWeights, Tensor

VARIANTS = ("baseline", "spatial", "masked_spatial")

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, UNK)
PIXEL_CENTER, PIXEL_SCALE = 0.5, 0.25


@dataclass(frozen=True)
class ModelConfig:
    vocab: tuple[str, ...]
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 2
    max_text_len: int = 12
    target_map_size: int = 32
    decoder_channels: int = 16
    variant: str = "spatial"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    latent_matching: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.target_map_size:
            raise ValueError(f"target_map_size {self.target_map_size} must divide image_size {self.image_size}")
        if self.target_map_size % self.grid:
            raise ValueError(f"target_map_size {self.target_map_size} must be a multiple of the patch grid {self.grid}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if tuple(self.vocab[:3]) != SPECIAL_TOKENS:
            object.__setattr__(self, "vocab", SPECIAL_TOKENS + tuple(w for w in self.vocab if w not in SPECIAL_TOKENS))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def upsample_strides(self) -> tuple[int, int]:
        f = self.target_map_size // self.grid
        first = 2 if f % 2 == 0 and f > 1 else 1
        return first, f // first

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


class Tokenizer:
    def __init__(self, vocab, max_len: int):
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_len = max_len
        self.pad_id, self.cls_id, self.unk_id = (self.index[t] for t in SPECIAL_TOKENS)

    def tokenize(self, caption) -> list[int]:
        words = caption.split() if isinstance(caption, str) else list(caption)
        ids = [self.cls_id] + [self.index.get(w, self.unk_id) for w in words]
        ids = ids[: self.max_len]
        return ids + [self.pad_id] * (self.max_len - len(ids))

    def detokenize(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids if i not in (self.pad_id, self.cls_id))

    def batch(self, captions) -> np.ndarray:
        return np.array([self.tokenize(c) for c in captions], dtype=np.int64)


def tokenize(caption, vocab, max_len: int) -> list[int]:
    return Tokenizer(vocab, max_len).tokenize(caption)


@dataclass
class ModelOutput:
    logits: Tensor        # (b, 2)
    depth: Tensor         # (b, t, t)
    coords: Tensor        # (b, 3, t, t)
    edges: Tensor         # (b, t, t) probabilities
    hidden: dict = field(default_factory=dict)  # decoder latents, used by latent matching


@dataclass
class Targets:
    depth: np.ndarray     # (b, t, t) normalised depth
    coords: np.ndarray    # (b, 3, t, t) standardised coordinates
    edges: np.ndarray     # (b, t, t) in {0, 1}
    mask: np.ndarray | None = None  # (b, t, t) union of caption-object masks


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, c = images.shape
    g = h // patch
    x = images.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


_HEADS = {"depth": 1, "coords": 3, "edges": 1}


class SpatialViLT:
    """Text tokens and image patches share one transformer encoder.

    The pooled first ([CLS]) token feeds the true/false classifier; the
    patch-token grid is upsampled by transposed convolutions into depth,
    3-D coordinate and edge maps.
    """

    def __init__(self, config: ModelConfig, coord_stats: tuple[list[float], list[float]] | None = None):
        self.config = config
        self.tokenizer = Tokenizer(config.vocab, config.max_text_len)
        self.coord_stats = coord_stats or ([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    # -- parameters -----------------------------------------------------------
    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d = c.embed_dim
        pdim = c.patch_size * c.patch_size * 3
        hidden = c.mlp_ratio * d

        def dense(fan_in, fan_out):
            return rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out))

        self._add("tok_embed", rng.normal(0, 0.5, (len(c.vocab), d)))
        self._add("txt_pos", _sinusoid(np.arange(c.max_text_len), d))
        self._add("type_embed", rng.normal(0, 0.5, (2, d)))  # text, image
        self._add("patch_w", dense(pdim, d))
        self._add("patch_b", np.zeros(d))
        rows, cols = np.divmod(np.arange(c.grid * c.grid), c.grid)
        self._add("img_pos", np.concatenate([_sinusoid(rows, d // 2), _sinusoid(cols, d - d // 2)], axis=1))
        for i in range(c.num_layers):
            p = f"block{i}."
            self._add(p + "ln1_g", np.ones(d))
            self._add(p + "ln1_b", np.zeros(d))
            self._add(p + "qkv_w", dense(d, 3 * d))
            self._add(p + "qkv_b", np.zeros(3 * d))
            self._add(p + "proj_w", dense(d, d) / math.sqrt(2 * c.num_layers))
            self._add(p + "proj_b", np.zeros(d))
            self._add(p + "ln2_g", np.ones(d))
            self._add(p + "ln2_b", np.zeros(d))
            self._add(p + "fc1_w", dense(d, hidden))
            self._add(p + "fc1_b", np.zeros(hidden))
            self._add(p + "fc2_w", dense(hidden, d) / math.sqrt(2 * c.num_layers))
            self._add(p + "fc2_b", np.zeros(d))
        self._add("ln_f_g", np.ones(d))
        self._add("ln_f_b", np.zeros(d))
        self._add("pool_w", dense(d, d))
        self._add("pool_b", np.zeros(d))
        self._add("cls_w", dense(d, 2))
        self._add("cls_b", np.zeros(2))
        s1, s2 = c.upsample_strides
        ch = c.decoder_channels
        for head, out_ch in _HEADS.items():
            p = f"dec_{head}."
            self._add(p + "k1", rng.normal(0, 1 / math.sqrt(d), (d, ch, s1, s1)))
            self._add(p + "b1", np.zeros(ch))
            self._add(p + "k2", rng.normal(0, 1 / math.sqrt(ch), (ch, out_ch, s2, s2)))
            self._add(p + "b2", np.zeros(out_ch))
            if c.latent_matching:
                self._add(f"enc_{head}.k", rng.normal(0, 1 / math.sqrt(out_ch * s2 * s2), (ch, out_ch, s2, s2)))
                self._add(f"enc_{head}.b", np.zeros(ch))

    @staticmethod
    def tokenizer_for(config: ModelConfig) -> Tokenizer:
        return Tokenizer(config.vocab, config.max_text_len)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ----------------------------------------------------------------
    def encode(self, images: np.ndarray, token_ids: np.ndarray) -> Tensor:
        c = self.config
        P = self.params
        images = np.asarray(images)
        token_ids = np.asarray(token_ids, dtype=np.int64)
        b = images.shape[0]
        if images.shape[1:] != (c.image_size, c.image_size, 3):
            raise ad.ShapeError(f"images must be (b, {c.image_size}, {c.image_size}, 3), got {images.shape}")
        if token_ids.shape != (b, c.max_text_len):
            raise ad.ShapeError(f"token ids must be ({b}, {c.max_text_len}), got {token_ids.shape}")
        d, L = c.embed_dim, c.max_text_len
        n_img = c.grid * c.grid
        t = L + n_img

        patches = Tensor(patchify((images - PIXEL_CENTER) / PIXEL_SCALE, c.patch_size))
        kinds = ad.embedding(P["type_embed"], np.repeat([[0], [1]], [L, n_img], axis=0)[:, 0])
        pos = ad.concat([P["txt_pos"], P["img_pos"]], axis=0) + kinds
        x_img = ad.linear(patches, P["patch_w"], P["patch_b"])
        x_txt = ad.embedding(P["tok_embed"], token_ids)
        x = ad.concat([x_txt, x_img], axis=1) + ad.broadcast_to(pos, (b, t, d))

        keep = np.concatenate([token_ids != self.tokenizer.pad_id, np.ones((b, n_img), bool)], axis=1)
        key_mask = keep[:, None, None, :]
        heads, dh = c.num_heads, d // c.num_heads
        for i in range(c.num_layers):
            p = f"block{i}."
            h = ad.layer_norm(x, P[p + "ln1_g"], P[p + "ln1_b"])
            qkv = ad.linear(h, P[p + "qkv_w"], P[p + "qkv_b"])
            qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
            q, k, v = (ad.take(qkv, j, axis=0) for j in range(3))
            a = ad.softmax_attention(q, k, v, key_mask)
            a = ad.reshape(ad.transpose(a, (0, 2, 1, 3)), (b, t, d))
            x = x + ad.linear(a, P[p + "proj_w"], P[p + "proj_b"])
            h = ad.layer_norm(x, P[p + "ln2_g"], P[p + "ln2_b"])
            h = ad.relu(ad.linear(h, P[p + "fc1_w"], P[p + "fc1_b"]))
            x = x + ad.linear(h, P[p + "fc2_w"], P[p + "fc2_b"])
        return ad.layer_norm(x, P["ln_f_g"], P["ln_f_b"])

    def _decode(self, head: str, grid: Tensor) -> tuple[Tensor, Tensor]:
        P = self.params
        s1, s2 = self.config.upsample_strides
        p = f"dec_{head}."
        h = ad.transposed_conv2d(grid, P[p + "k1"], stride=s1)
        h = ad.relu(h + _channel_bias(P[p + "b1"], h.shape))
        out = ad.transposed_conv2d(h, P[p + "k2"], stride=s2)
        return out + _channel_bias(P[p + "b2"], out.shape), h

    def forward(self, images: np.ndarray, token_ids: np.ndarray) -> ModelOutput:
        c = self.config
        P = self.params
        x = self.encode(images, token_ids)
        b = x.shape[0]
        cls = ad.take(x, 0, axis=1)
        pooled = ad.tanh(ad.linear(cls, P["pool_w"], P["pool_b"]))
        logits = ad.linear(pooled, P["cls_w"], P["cls_b"])

        g = c.grid
        grid = ad.take(x, slice(c.max_text_len, None), axis=1)
        grid = ad.transpose(ad.reshape(grid, (b, g, g, c.embed_dim)), (0, 3, 1, 2))
        t = c.target_map_size
        depth, h_d = self._decode("depth", grid)
        coords, h_r = self._decode("coords", grid)
        edge_logits, h_e = self._decode("edges", grid)
        return ModelOutput(
            logits=logits,
            depth=ad.reshape(depth, (b, t, t)),
            coords=coords,
            edges=ad.reshape(ad.sigmoid(edge_logits), (b, t, t)),
            hidden={"depth": h_d, "coords": h_r, "edges": h_e},
        )

    __call__ = forward

    def encode_target(self, head: str, target: np.ndarray) -> Tensor:
        """CNN encoding of a target map into the decoder's latent space."""
        P = self.params
        s2 = self.config.upsample_strides[1]
        tgt = Tensor(target if target.ndim == 4 else target[:, None])
        h = ad.conv2d(tgt, P[f"enc_{head}.k"], stride=s2)
        return ad.relu(h + _channel_bias(P[f"enc_{head}.b"], h.shape))

    def logits_numpy(self, images: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
        return self.forward(images, token_ids).logits.data


def _sinusoid(pos: np.ndarray, dim: int) -> np.ndarray:
    """Sine/cosine position code; nearby positions get similar vectors."""
    freq = 1.0 / (16.0 ** (np.arange(0, dim, 2) / max(dim, 2)))
    ang = pos[:, None] * freq[None, :]
    out = np.zeros((len(pos), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : dim // 2]
    return out


def _channel_bias(bias: Tensor, shape) -> Tensor:
    return ad.broadcast_to(ad.reshape(bias, (1, bias.shape[0], 1, 1)), shape)


def compute_total_loss(outputs: ModelOutput, targets: Targets | None, labels: np.ndarray,
                       weights: LossWeights, variant: str,
                       model: SpatialViLT | None = None) -> tuple[Tensor, LossBreakdown]:
    """Classification loss plus weighted depth, coordinate and edge reconstruction."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    l_c = ad.softmax_cross_entropy(outputs.logits, labels)
    if variant == "baseline":
        value = l_c.item()
        return l_c, LossBreakdown(value, 0.0, 0.0, 0.0, value)
    if targets is None:
        raise ValueError(f"variant {variant!r} needs spatial targets")
    mask = None
    if variant == "masked_spatial":
        if targets.mask is None:
            raise ValueError("masked_spatial needs a union object mask")
        mask = targets.mask
    if model is not None and model.config.latent_matching:
        l_d, l_r, l_e = (_latent_loss(model, outputs, head, tgt, mask) for head, tgt in
                         (("depth", targets.depth), ("coords", targets.coords), ("edges", targets.edges)))
    else:
        l_d = ad.mse(outputs.depth, targets.depth, mask)
        l_r = ad.mse(outputs.coords, targets.coords, mask)
        l_e = ad.bce(outputs.edges, targets.edges, mask)
    total = (l_c + ad.mul(l_d, weights.lambda_depth) + ad.mul(l_r, weights.lambda_coords)
             + ad.mul(l_e, weights.lambda_edges))
    return total, LossBreakdown(l_c.item(), l_d.item(), l_r.item(), l_e.item(), total.item())


def _latent_loss(model: SpatialViLT, outputs: ModelOutput, head: str, target: np.ndarray,
                 mask: np.ndarray | None) -> Tensor:
    hidden = outputs.hidden[head]
    gap = ad.sub(hidden, model.encode_target(head, target))
    return ad.mse(gap, np.zeros(gap.shape, dtype=gap.data.dtype), _latent_mask(mask, hidden))


def _latent_mask(mask: np.ndarray | None, hidden: Tensor) -> np.ndarray | None:
    if mask is None:
        return None
    b, ch, h, w = hidden.shape
    f = mask.shape[-1] // w
    pooled = mask.reshape(b, h, f, w, f).max(axis=(2, 4))
    return np.broadcast_to(pooled[:, None], hidden.shape)

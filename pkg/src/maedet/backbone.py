"""Frozen masked-autoencoder backbone: patchification, context encoding,
masked-patch reconstruction, and the global image feature.

The backbone is a standard ViT encoder/decoder pair operating on flattened
patch vectors. Three architectures are registered: ``large-16`` and
``base-16`` mirror the usual ViT-L/16 and ViT-B/16 geometries (224 px inputs,
16 px patches), while ``toy-4`` is a miniature variant (32 px inputs, 4 px
patches, 4+2 blocks) that trains in seconds on a CPU and is used throughout
the test suite. The toy grid is kept at 8x8 = 64 patches so that a 0.75
masking ratio still leaves 16 visible patches — enough for stable per-context
statistics. All three share identical interfaces.

Weight archives are ``.npz`` files of named parameter arrays with a JSON
metadata sidecar (``<stem>.meta.json``) holding the architecture tag, the
per-channel normalization constants and the parameter digest. See
:func:`save_backbone` for the exact layout.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArchMismatchError, DimensionError, FormatError, MaskError

ARCHIVE_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Architectures


@dataclass(frozen=True)
class ArchSpec:
    image_size: int
    patch_size: int
    in_chans: int
    embed_dim: int
    depth: int
    num_heads: int
    decoder_embed_dim: int
    decoder_depth: int
    decoder_num_heads: int
    mlp_ratio: float
    norm_mean: tuple[float, ...]
    norm_std: tuple[float, ...]

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans


_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

ARCHS: dict[str, ArchSpec] = {
    "large-16": ArchSpec(224, 16, 3, 1024, 24, 16, 512, 8, 16, 4.0, _IMAGENET_MEAN, _IMAGENET_STD),
    "base-16": ArchSpec(224, 16, 3, 768, 12, 12, 512, 8, 16, 4.0, _IMAGENET_MEAN, _IMAGENET_STD),
    "toy-4": ArchSpec(32, 4, 3, 64, 4, 4, 48, 2, 4, 2.0, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


def arch_spec(arch_tag: str) -> ArchSpec:
    try:
        return ARCHS[arch_tag]
    except KeyError:
        raise ArchMismatchError(f"unknown architecture tag {arch_tag!r}") from None


# ---------------------------------------------------------------------------
# Patch grids


@dataclass
class PatchGrid:
    """An image decomposed into M non-overlapping flattened patches.

    ``patches`` is an M x P float64 matrix in row-major patch order; each row
    flattens one patch_size x patch_size x C block in (row, col, channel)
    order. Values are in normalized pixel units (normalization is applied
    exactly once, upstream of patchify).
    """

    patches: np.ndarray
    grid_shape: tuple[int, int]
    patch_size: int
    image_id: str = ""

    def __post_init__(self) -> None:
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2:
            raise DimensionError("patches must be a 2-D matrix")
        rows, cols = self.grid_shape
        if self.patches.shape[0] != rows * cols:
            raise DimensionError(
                f"expected {rows * cols} patches for grid {self.grid_shape}, "
                f"got {self.patches.shape[0]}"
            )
        per_patch = self.patch_size * self.patch_size
        if self.patches.shape[1] % per_patch != 0:
            raise DimensionError("patch vector length is not a multiple of patch_size^2")
        if self.channels not in (1, 3):
            raise DimensionError(f"unsupported channel count {self.channels}")
        if not np.isfinite(self.patches).all():
            raise ValueError("patch values must be finite")

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]

    @property
    def channels(self) -> int:
        return self.patches.shape[1] // (self.patch_size * self.patch_size)


def patchify(image: np.ndarray, patch_size: int, image_id: str = "") -> PatchGrid:
    """Split an H x W x C array into a PatchGrid of flattened patches.

    H and W must be exact multiples of patch_size; C must be 1 or 3.
    unpatchify(patchify(x)) reproduces x exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise DimensionError("image must be H x W x C")
    h, w, c = image.shape
    if c not in (1, 3):
        raise DimensionError(f"unsupported channel count {c}")
    if patch_size <= 0 or h % patch_size != 0 or w % patch_size != 0:
        raise DimensionError(
            f"image {h}x{w} is not divisible into {patch_size}px patches"
        )
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite pixels")
    rows, cols = h // patch_size, w // patch_size
    patches = (
        image.reshape(rows, patch_size, cols, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size * patch_size * c)
    )
    return PatchGrid(patches.copy(), (rows, cols), patch_size, image_id)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify`; returns an H x W x C array."""
    rows, cols = grid.grid_shape
    ps = grid.patch_size
    c = grid.channels
    return (
        grid.patches.reshape(rows, cols, ps, ps, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * ps, cols * ps, c)
    )


def normalize_image(image01: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel (x - mean) / std on an H x W x C array in [0, 1] units."""
    image01 = np.asarray(image01, dtype=np.float64)
    if image01.ndim == 2:
        image01 = image01[:, :, None]
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 1, -1)
    std = np.asarray(std, dtype=np.float64).reshape(1, 1, -1)
    return (image01 - mean) / std


# ---------------------------------------------------------------------------
# Position embeddings (fixed 2-D sine/cosine, as in standard MAE practice)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000**omega
    angles = positions.reshape(-1, 1) * omega.reshape(1, -1)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed(embed_dim: int, rows: int, cols: int, with_cls: bool = True) -> np.ndarray:
    """Fixed [1 + rows*cols, embed_dim] embedding; the cls slot is all zeros."""
    if embed_dim % 4 != 0:
        raise DimensionError("embed_dim must be a multiple of 4 for 2-D sincos")
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    emb = np.concatenate(
        [
            _sincos_1d(embed_dim // 2, rr.reshape(-1).astype(np.float64)),
            _sincos_1d(embed_dim // 2, cc.reshape(-1).astype(np.float64)),
        ],
        axis=1,
    )
    if with_cls:
        emb = np.concatenate([np.zeros((1, embed_dim)), emb], axis=0)
    return emb


# ---------------------------------------------------------------------------
# Transformer building blocks


class _Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        if dim % num_heads != 0:
            raise DimensionError("embed dim must divide evenly across heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MaskedAutoencoder(nn.Module):
    """ViT encoder/decoder that reconstructs masked patches from visible ones.

    The decoder predicts directly in the grid's normalized-pixel space (no
    per-patch target renormalization), so reconstructions are comparable to
    PatchGrid rows without further transformation.
    """

    def __init__(self, spec: ArchSpec) -> None:
        super().__init__()
        self.spec = spec
        side = spec.grid_side
        self.patch_embed = nn.Linear(spec.patch_dim, spec.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.embed_dim))
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(sincos_pos_embed(spec.embed_dim, side, side)).float(),
        )
        self.blocks = nn.ModuleList(
            [_Block(spec.embed_dim, spec.num_heads, spec.mlp_ratio) for _ in range(spec.depth)]
        )
        self.norm = nn.LayerNorm(spec.embed_dim)

        self.decoder_embed = nn.Linear(spec.embed_dim, spec.decoder_embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, spec.decoder_embed_dim))
        self.register_buffer(
            "decoder_pos_embed",
            torch.from_numpy(sincos_pos_embed(spec.decoder_embed_dim, side, side)).float(),
        )
        self.decoder_blocks = nn.ModuleList(
            [
                _Block(spec.decoder_embed_dim, spec.decoder_num_heads, spec.mlp_ratio)
                for _ in range(spec.decoder_depth)
            ]
        )
        self.decoder_norm = nn.LayerNorm(spec.decoder_embed_dim)
        self.decoder_pred = nn.Linear(spec.decoder_embed_dim, spec.patch_dim)

        self.forward_count = 0  # encoder invocations, for cache accounting

    # -- encoder -----------------------------------------------------------

    def encode(self, patches: torch.Tensor, visible_idx: torch.Tensor | None = None) -> torch.Tensor:
        """Encode a [B, M, P] batch; returns [B, 1 + V, D] tokens (cls first).

        With visible_idx (a [B, V] index tensor) only those patches enter the
        encoder; otherwise all M are visible.
        """
        self.forward_count += 1
        b = patches.shape[0]
        tokens = self.patch_embed(patches) + self.pos_embed[1:].unsqueeze(0)
        if visible_idx is not None:
            gather = visible_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
            tokens = torch.gather(tokens, 1, gather)
        cls = (self.cls_token + self.pos_embed[:1].unsqueeze(0)).expand(b, -1, -1)
        x = torch.cat([cls, tokens], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    # -- decoder -----------------------------------------------------------

    def decode(self, encoded: torch.Tensor, visible_idx: torch.Tensor) -> torch.Tensor:
        """Reconstruct all M patch vectors from encoded visible tokens.

        Returns [B, M, P]; rows at visible positions are predictions too and
        are discarded by callers that only need the masked rows.
        """
        b = encoded.shape[0]
        m = self.spec.num_patches
        y = self.decoder_embed(encoded)
        full = self.mask_token.expand(b, m, -1).clone()
        scatter = visible_idx.unsqueeze(-1).expand(-1, -1, y.shape[-1])
        full = full.scatter(1, scatter, y[:, 1:, :])
        full = full + self.decoder_pos_embed[1:].unsqueeze(0)
        cls = y[:, :1, :] + self.decoder_pos_embed[:1].unsqueeze(0)
        x = torch.cat([cls, full], dim=1)
        for block in self.decoder_blocks:
            x = block(x)
        x = self.decoder_norm(x)
        return self.decoder_pred(x)[:, 1:, :]

    def predict_patches(self, patches: torch.Tensor, visible_idx: torch.Tensor) -> torch.Tensor:
        """Differentiable visible-context reconstruction of all M patches."""
        return self.decode(self.encode(patches, visible_idx), visible_idx)


def _deterministic_init(model: MaskedAutoencoder, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Linear):
            fan_in, fan_out = module.weight.shape[1], module.weight.shape[0]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    with torch.no_grad():
        model.cls_token.normal_(0.0, 0.02, generator=gen)
        model.mask_token.normal_(0.0, 0.02, generator=gen)


def build_mae(arch_tag: str, seed: int = 0) -> MaskedAutoencoder:
    """Construct a MaskedAutoencoder with deterministic seeded initialization."""
    model = MaskedAutoencoder(arch_spec(arch_tag))
    _deterministic_init(model, seed)
    return model


# ---------------------------------------------------------------------------
# Frozen handle


def _digest_state(model: nn.Module) -> str:
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        if name in ("pos_embed", "decoder_pos_embed"):
            continue  # fixed buffers, derived from the architecture
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class BackboneHandle:
    """A (usually frozen) backbone plus the metadata needed to use it.

    Safe to share across concurrent inference callers: no method mutates
    parameters. ``param_digest`` is the content hash taken when the handle
    was created; ``current_digest()`` recomputes it for freeze checks.
    """

    model: MaskedAutoencoder
    arch_tag: str
    norm_mean: tuple[float, ...]
    norm_std: tuple[float, ...]
    frozen: bool = True
    param_digest: str = field(default="")

    def __post_init__(self) -> None:
        if self.frozen:
            self.model.requires_grad_(False)
            self.model.eval()
        if not self.param_digest:
            self.param_digest = _digest_state(self.model)

    @property
    def spec(self) -> ArchSpec:
        return self.model.spec

    @property
    def embed_dim(self) -> int:
        return self.model.spec.embed_dim

    @property
    def forward_count(self) -> int:
        return self.model.forward_count

    def current_digest(self) -> str:
        return _digest_state(self.model)

    def _check_grid(self, grid: PatchGrid) -> None:
        spec = self.spec
        if grid.num_patches != spec.num_patches or grid.patch_dim != spec.patch_dim:
            raise DimensionError(
                f"grid {grid.num_patches}x{grid.patch_dim} does not match "
                f"{self.arch_tag} ({spec.num_patches}x{spec.patch_dim})"
            )

    def reconstruct(self, grid: PatchGrid, mask) -> np.ndarray:
        """Reconstruct masked patches from the visible context.

        Returns an M x P float64 matrix: masked rows hold decoder
        reconstructions, visible rows hold the original patches unchanged.
        """
        self._check_grid(grid)
        mask_idx = validate_mask(mask, grid.num_patches)
        visible_idx = np.setdiff1d(np.arange(grid.num_patches), mask_idx)
        with torch.no_grad():
            patches = torch.from_numpy(grid.patches).float().unsqueeze(0)
            vis = torch.from_numpy(visible_idx).long().unsqueeze(0)
            pred = self.model.predict_patches(patches, vis)[0].double().numpy()
        out = grid.patches.copy()
        out[mask_idx] = pred[mask_idx]
        return out

    def encode_patch_tokens(self, grid: PatchGrid) -> np.ndarray:
        """Encoder output tokens for all patches (cls excluded), M x D."""
        self._check_grid(grid)
        with torch.no_grad():
            patches = torch.from_numpy(grid.patches).float().unsqueeze(0)
            tokens = self.model.encode(patches)[0, 1:, :]
        return tokens.numpy()

    def global_feature(self, grid: PatchGrid) -> np.ndarray:
        """Arithmetic mean of the encoder patch tokens (cls token excluded)."""
        tokens = self.encode_patch_tokens(grid)
        return tokens.mean(axis=0)

    def clone_unfrozen(self, unfreeze: str = "both") -> "BackboneHandle":
        """Deep-copied handle with selected parts trainable.

        unfreeze is one of "encoder", "decoder", "both". Exists only for the
        freezing-ablation harness; the detection pipeline never uses it.
        """
        if unfreeze not in ("encoder", "decoder", "both"):
            raise ValueError(f"unknown unfreeze selector {unfreeze!r}")
        model = copy.deepcopy(self.model)
        model.requires_grad_(False)
        decoder_names = ("decoder_", "mask_token")
        for name, param in model.named_parameters():
            is_decoder = name.startswith(decoder_names)
            if unfreeze == "both" or (unfreeze == "decoder") == is_decoder:
                param.requires_grad_(True)
        return BackboneHandle(
            model=model,
            arch_tag=self.arch_tag,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            frozen=False,
            param_digest=_digest_state(model),
        )


def validate_mask(mask, num_patches: int) -> np.ndarray:
    """Check a mask index set and return it as a sorted int64 array."""
    idx = np.asarray(sorted(set(int(i) for i in np.asarray(mask).reshape(-1))), dtype=np.int64)
    if idx.size == 0:
        raise MaskError("mask is empty")
    if idx.size >= num_patches:
        raise MaskError("mask covers every patch; no visible context remains")
    if idx.min() < 0 or idx.max() >= num_patches:
        raise MaskError(f"mask indices out of range for M={num_patches}")
    return idx


# ---------------------------------------------------------------------------
# Weight archives


def sidecar_path(weights_path: str | Path) -> Path:
    p = Path(weights_path)
    return p.with_name(p.stem + ".meta.json")


def save_backbone(handle: BackboneHandle, weights_path: str | Path) -> None:
    """Write the npz parameter archive and its JSON metadata sidecar."""
    p = Path(weights_path)
    p.parent.mkdir(parents=True, exist_ok=True)
    state = handle.model.state_dict()
    arrays = {
        name: state[name].detach().cpu().numpy()
        for name in sorted(state)
        if name not in ("pos_embed", "decoder_pos_embed")
    }
    np.savez(p, **arrays)
    meta = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "arch_tag": handle.arch_tag,
        "norm_mean": list(handle.norm_mean),
        "norm_std": list(handle.norm_std),
        "param_digest": _digest_state(handle.model),
    }
    sidecar_path(p).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_backbone(weights_path: str | Path, arch_tag: str) -> BackboneHandle:
    """Load a weight archive as a frozen, deterministic backbone handle."""
    p = Path(weights_path)
    if not p.is_file():
        raise FormatError(f"weights archive not found: {p}")
    meta_path = sidecar_path(p)
    if not meta_path.is_file():
        raise FormatError(f"metadata sidecar not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed sidecar {meta_path}: {exc}") from exc
    stored_tag = meta.get("arch_tag")
    if stored_tag != arch_tag:
        raise ArchMismatchError(
            f"archive was saved for {stored_tag!r}, requested {arch_tag!r}"
        )
    spec = arch_spec(arch_tag)
    try:
        with np.load(p) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except Exception as exc:  # zipfile or numpy parse failure
        raise FormatError(f"malformed weights archive {p}: {exc}") from exc

    model = MaskedAutoencoder(spec)
    expected = {
        name: tuple(t.shape)
        for name, t in model.state_dict().items()
        if name not in ("pos_embed", "decoder_pos_embed")
    }
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ArchMismatchError(
            f"parameter names disagree with {arch_tag}: missing={missing} extra={extra}"
        )
    for name, arr in arrays.items():
        if tuple(arr.shape) != expected[name]:
            raise ArchMismatchError(
                f"shape of {name} is {tuple(arr.shape)}, expected {expected[name]}"
            )
    with torch.no_grad():
        model.load_state_dict(
            {name: torch.from_numpy(arr).float() for name, arr in arrays.items()},
            strict=False,
        )
    handle = BackboneHandle(
        model=model,
        arch_tag=arch_tag,
        norm_mean=tuple(meta.get("norm_mean", spec.norm_mean)),
        norm_std=tuple(meta.get("norm_std", spec.norm_std)),
        frozen=True,
    )
    stored_digest = meta.get("param_digest")
    if stored_digest and stored_digest != handle.param_digest:
        raise FormatError(f"archive {p} failed its digest check")
    return handle


def create_toy_backbone(seed: int = 0, arch_tag: str = "toy-4", frozen: bool = True) -> BackboneHandle:
    """Fresh deterministically-initialized backbone (untrained)."""
    spec = arch_spec(arch_tag)
    model = build_mae(arch_tag, seed)
    return BackboneHandle(
        model=model,
        arch_tag=arch_tag,
        norm_mean=spec.norm_mean,
        norm_std=spec.norm_std,
        frozen=frozen,
    )


# ---------------------------------------------------------------------------
# Desk-scale pretraining


class MaePretrainer:
    """Trains a MaskedAutoencoder on masked-patch reconstruction (MSE on
    masked rows only), with per-step random masks at a fixed ratio.

    Operates on a fixed in-memory stack of patch grids; deterministic for a
    given (model init, images, seed).
    """

    def __init__(
        self,
        model: MaskedAutoencoder,
        patch_stacks: np.ndarray,
        mask_ratio: float = 0.75,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        seed: int = 0,
    ) -> None:
        if patch_stacks.ndim != 3:
            raise DimensionError("patch_stacks must be [N, M, P]")
        m = model.spec.num_patches
        n_masked = int(round(mask_ratio * m))
        if n_masked < 1 or n_masked >= m:
            raise ValueError(f"mask_ratio {mask_ratio} is degenerate for M={m}")
        self.model = model
        self.data = torch.from_numpy(np.asarray(patch_stacks)).float()
        self.mask_ratio = mask_ratio
        self.n_masked = n_masked
        self.batch_size = batch_size
        self.optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
        self.generator = torch.Generator().manual_seed(seed)
        self.epochs_done = 0

    def train_epoch(self) -> float:
        """One pass over the data; returns the mean masked-MSE loss."""
        self.model.train()
        n = self.data.shape[0]
        m = self.model.spec.num_patches
        order = torch.randperm(n, generator=self.generator)
        total, batches = 0.0, 0
        for start in range(0, n, self.batch_size):
            batch = self.data[order[start : start + self.batch_size]]
            b = batch.shape[0]
            noise = torch.rand(b, m, generator=self.generator)
            shuffle = noise.argsort(dim=1)
            vis_idx, _ = shuffle[:, self.n_masked :].sort(dim=1)
            mask_idx = shuffle[:, : self.n_masked]
            pred = self.model.predict_patches(batch, vis_idx)
            gather = mask_idx.unsqueeze(-1).expand(-1, -1, batch.shape[-1])
            loss = F.mse_loss(torch.gather(pred, 1, gather), torch.gather(batch, 1, gather))
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            total += float(loss.detach())
            batches += 1
        self.model.eval()
        self.epochs_done += 1
        return total / max(batches, 1)

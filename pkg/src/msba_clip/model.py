"""Text-guided ViT detector: patch tokens + projected prompt token, with a
classification head, a prompt-similarity head and the MFIE auxiliary heads."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mfie import BlendWeightHead, IntensityDecoder, IntensityHead, IntensityPrediction

CLASS_NAMES = ("DeepFakes", "NeuralTextures", "FaceSwap", "Face2Face", "Unknown")
UNKNOWN = CLASS_NAMES.index("Unknown")
CLASS_TEMPLATE = "The forgery type of this fake face is {}"
FAKE_PROMPTS = (
    "A manipulated face",
    "This is a synthetic portrait",
    "This is a fake face image.",
    "A forged facial photograph",
    "A digitally altered face",
    "An edited picture of a person",
    "A face produced by a deepfake generator",
    "A face with tampered regions",
    "A swapped identity in this portrait",
    "A reenacted facial expression",
    "An artificial face with blending traces",
    "A photo of a counterfeit face",
    "A face with inconsistent texture",
    "A computer generated human face",
    "A doctored image of a face",
    "A face that has been retouched by software",
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    patch_size: int = 8
    d_v: int = 128
    d_t: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    mip_hidden: int = 128
    num_fake_prompts: int = 16
    num_methods: int = 4
    decoder_width: int | None = None
    text_depth: int = 2
    text_heads: int = 4
    vocab_size: int = 4096
    max_text_tokens: int = 32
    text_seed: int = 20240501
    kappa_init: float = 10.0
    kappa_range: tuple[float, float] = (1.0, 100.0)
    backbone: str = "toy"

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.kappa_range = tuple(self.kappa_range)
        if self.d_v % self.heads:
            raise ValueError("d_v must be divisible by heads")
        if self.d_t % self.text_heads:
            raise ValueError("d_t must be divisible by text_heads")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError("image side must be divisible by the patch size")
        if not 1 <= self.num_fake_prompts:
            raise ValueError("need at least one generic fake prompt")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PromptTable:
    class_prompts: dict[str, str] = field(
        default_factory=lambda: {c: CLASS_TEMPLATE.format(c) for c in CLASS_NAMES}
    )
    fake_prompts: list[str] = field(default_factory=lambda: list(FAKE_PROMPTS))

    def __post_init__(self):
        if set(self.class_prompts) != set(CLASS_NAMES):
            raise ValueError(f"class prompts must be given for exactly {CLASS_NAMES}")
        self.class_prompts = {c: self.class_prompts[c] for c in CLASS_NAMES}
        if not self.fake_prompts:
            raise ValueError("need at least one generic fake prompt")
        for s in [*self.class_prompts.values(), *self.fake_prompts]:
            if not s.strip():
                raise ValueError("prompt strings must be nonempty")

    @classmethod
    def default(cls, num_fake_prompts: int = 16) -> "PromptTable":
        if num_fake_prompts > len(FAKE_PROMPTS):
            raise ValueError(f"at most {len(FAKE_PROMPTS)} built-in fake prompts")
        return cls(fake_prompts=list(FAKE_PROMPTS[:num_fake_prompts]))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PromptTable":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# building blocks


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
        elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim, bias=False)  # a key bias cancels in the softmax
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape

        def split(t):
            return t.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) * (d // self.heads) ** -0.5
        if key_mask is not None:
            # key_mask: (n,) True where the key may be attended to
            scores = scores.masked_fill(~key_mask, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


def fnv1a_64(word: str) -> int:
    h = FNV_OFFSET
    for byte in word.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(prompt: str, vocab_size: int = 4096, max_tokens: int = 32) -> list[int]:
    words = re.findall(r"[a-z0-9]+", prompt.lower())
    if not words:
        raise ValueError("cannot encode an empty prompt")
    return [fnv1a_64(w) % vocab_size for w in words[:max_tokens]]


class ToyTextEncoder(nn.Module):
    """Hash-vocabulary text transformer standing in for a pretrained text tower.

    Weights come from a fixed generator seed and are frozen, so prompt
    features do not depend on the detector's training seed.
    """

    def __init__(self, d_t: int, depth: int = 2, heads: int = 4, vocab_size: int = 4096,
                 max_tokens: int = 32, seed: int = 0):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.embed = nn.Embedding(vocab_size, d_t)
        self.pos = nn.Parameter(torch.zeros(max_tokens, d_t))
        self.blocks = nn.ModuleList(Block(d_t, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(d_t)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            trunc_normal_init(self)
            nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04)
        self.requires_grad_(False)

    def forward(self, prompt: str) -> torch.Tensor:
        ids = torch.tensor(tokenize(prompt, self.vocab_size, self.max_tokens), device=self.pos.device)
        x = (self.embed(ids) + self.pos[: len(ids)])[None]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[0].mean(dim=0)


class Backbone(Protocol):
    """What the detector needs from a (possibly pretrained) vision-language backbone."""

    d_v: int
    d_t: int
    patch_size: int

    def embed(self, images: torch.Tensor) -> torch.Tensor: ...  # (B,3,H,W) -> (B, N+1, d_v)

    def encode(self, tokens: torch.Tensor, key_mask: torch.Tensor | None = None) -> list[torch.Tensor]: ...

    def encode_text(self, prompt: str) -> torch.Tensor: ...  # -> (d_t,)


PIXEL_MEAN, PIXEL_STD = 0.5, 0.25  # fixed input normalization of the toy backbone


class ToyBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.d_v, self.d_t, self.patch_size = cfg.d_v, cfg.d_t, cfg.patch_size
        self.patch_embed = nn.Conv2d(3, cfg.d_v, cfg.patch_size, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.d_v))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, cfg.d_v))
        self.blocks = nn.ModuleList(Block(cfg.d_v, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        trunc_normal_init(self)
        nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)
        self.text = ToyTextEncoder(cfg.d_t, cfg.text_depth, cfg.text_heads, cfg.vocab_size,
                                   cfg.max_text_tokens, cfg.text_seed)

    def patch_tokens(self, images: torch.Tensor) -> torch.Tensor:
        images = (images - PIXEL_MEAN) / PIXEL_STD
        return self.patch_embed(images).flatten(2).transpose(1, 2)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        p = self.patch_size
        if images.shape[-1] % p or images.shape[-2] % p:
            raise ValueError(f"image size {tuple(images.shape[-2:])} not divisible by patch size {p}")
        patches = self.patch_tokens(images)
        if patches.shape[1] + 1 != self.pos_embed.shape[1]:
            raise ValueError("image size does not match the positional embedding table")
        cls = self.cls_token.expand(images.shape[0], -1, -1)
        return torch.cat([cls, patches], dim=1) + self.pos_embed

    def encode(self, tokens, key_mask=None):
        hidden = [tokens]
        for blk in self.blocks:
            hidden.append(blk(hidden[-1], key_mask))
        return hidden

    def encode_text(self, prompt: str) -> torch.Tensor:
        return self.text(prompt)


class MultimodalProjection(nn.Module):
    """LayerNorm followed by a two-layer GELU perceptron, d_t -> d_v."""

    def __init__(self, d_t: int, hidden: int, d_v: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_t)
        self.fc1 = nn.Linear(d_t, hidden)
        self.fc2 = nn.Linear(hidden, d_v)

    def forward(self, f_t: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(f_t).all():
            raise ValueError("text feature contains non-finite values")
        return self.fc2(F.gelu(self.fc1(self.norm(f_t))))


# ---------------------------------------------------------------------------
# heads as plain functions


def similarity_score(cls_proj: torch.Tensor, prompt_features: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity between each projected [CLS] row and the L prompt features."""
    a = cls_proj.norm(dim=-1)
    b = prompt_features.norm(dim=-1)
    if (a == 0).any() or (b == 0).any():
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    cos = (cls_proj / a[..., None]) @ (prompt_features / b[:, None]).T
    return cos.mean(dim=-1).clamp(-1.0, 1.0)


def fused_prediction(z_cls, s, kappa):
    return 0.5 * torch.sigmoid(z_cls) + 0.5 * torch.sigmoid(kappa * s)


@dataclass
class VisualFeatures:
    cls: torch.Tensor  # (B, d_v)
    patches: torch.Tensor  # (B, N, d_v)
    text_token_out: torch.Tensor  # (B, d_v)


@dataclass
class ModelOutput:
    z_cls: torch.Tensor
    s: torch.Tensor
    fused_prob: torch.Tensor
    features: VisualFeatures
    intensity: IntensityPrediction | None = None
    alpha_hat: torch.Tensor | None = None
    kappa: torch.Tensor | None = None


class MSBACLIP(nn.Module):
    def __init__(self, config: ModelConfig | None = None, prompts: PromptTable | None = None,
                 backbone: nn.Module | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.prompts = prompts or PromptTable.default(cfg.num_fake_prompts)
        if len(self.prompts.fake_prompts) != cfg.num_fake_prompts:
            raise ValueError("prompt table size does not match num_fake_prompts")
        self.backbone = backbone if backbone is not None else ToyBackbone(cfg)
        if (self.backbone.d_v, self.backbone.d_t) != (cfg.d_v, cfg.d_t):
            raise ValueError("backbone widths do not match the model config")
        self.mip = MultimodalProjection(cfg.d_t, cfg.mip_hidden, cfg.d_v)
        self.post_norm = nn.LayerNorm(cfg.d_v)
        self.head = nn.Linear(cfg.d_v, 1)
        self.sim_proj = nn.Linear(cfg.d_v, cfg.d_t, bias=False)
        width = cfg.decoder_width or cfg.d_v
        self.decoder = IntensityDecoder(cfg.d_v, width)
        self.intensity_head = IntensityHead(width, cfg.d_v, cfg.num_methods)
        self.blend_head = BlendWeightHead(cfg.d_v, cfg.num_methods)
        for mod in (self.mip, self.post_norm, self.head, self.sim_proj, self.decoder, self.intensity_head):
            trunc_normal_init(mod)
        self.kappa = nn.Parameter(torch.tensor(float(cfg.kappa_init)))
        with torch.no_grad():
            class_feats = torch.stack([self.backbone.encode_text(self.prompts.class_prompts[c]) for c in CLASS_NAMES])
            fake_feats = torch.stack([self.backbone.encode_text(t) for t in self.prompts.fake_prompts])
        self.register_buffer("class_features", class_feats.clone())
        self.register_buffer("fake_features", fake_feats.clone())

    @property
    def kappa_value(self) -> torch.Tensor:
        return self.kappa.clamp(*self.config.kappa_range)

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone.embed(images)

    def encode_text(self, prompt: str) -> torch.Tensor:
        if not prompt or not prompt.strip():
            raise ValueError("cannot encode an empty prompt")
        return self.backbone.encode_text(prompt)

    def mip_project(self, f_t: torch.Tensor) -> torch.Tensor:
        return self.mip(f_t)

    def fuse_and_encode(self, tokens: torch.Tensor, text_token: torch.Tensor,
                        block_text: bool = False) -> VisualFeatures:
        if tokens.shape[-1] != text_token.shape[-1]:
            raise ValueError("visual and text token widths differ")
        if text_token.dim() == 1:
            text_token = text_token.expand(tokens.shape[0], -1)
        seq = torch.cat([tokens, text_token[:, None, :]], dim=1)
        key_mask = None
        if block_text:
            key_mask = torch.ones(seq.shape[1], dtype=torch.bool, device=seq.device)
            key_mask[-1] = False
        hidden = self.backbone.encode(seq, key_mask)
        last, penult = hidden[-1], hidden[-2]
        return VisualFeatures(cls=self.post_norm(last[:, 0]), patches=penult[:, 1:-1], text_token_out=last[:, -1])

    def classify(self, cls: torch.Tensor) -> torch.Tensor:
        return self.head(cls).squeeze(-1)

    def similarity(self, cls: torch.Tensor) -> torch.Tensor:
        return similarity_score(self.sim_proj(cls), self.fake_features)

    def forward(self, images: torch.Tensor, prompt_idx: torch.Tensor | int | None = None,
                block_text: bool = False, with_aux: bool = True) -> ModelOutput:
        """``images`` is (B, 3, H, W); ``prompt_idx`` selects the class prompt per sample."""
        if prompt_idx is None:
            prompt_idx = UNKNOWN
        if isinstance(prompt_idx, int):
            prompt_idx = torch.full((images.shape[0],), prompt_idx, dtype=torch.long, device=images.device)
        f_t = self.class_features.to(images.dtype)[prompt_idx]
        text_token = self.mip_project(f_t)
        feats = self.fuse_and_encode(self.embed_patches(images), text_token, block_text)
        z = self.classify(feats.cls)
        s = self.similarity(feats.cls)
        y_hat = fused_prediction(z, s, self.kappa_value)
        out = ModelOutput(z, s, y_hat, feats, kappa=self.kappa_value)
        if with_aux:
            h, w = self.config.grid
            out.intensity = self.intensity_head(self.decoder(feats.patches, (h, w)), feats.cls)
            out.alpha_hat = self.blend_head(feats.cls)
        return out


# ---------------------------------------------------------------------------
# checkpoint archive: magic, JSON header, then named float32 tensors

CKPT_MAGIC = b"MSBC"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, model: MSBACLIP, extra: dict | None = None) -> None:
    header = {
        "model": model.config.to_dict(),
        "prompts": json.loads(model.prompts.to_json()),
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[MSBACLIP, dict]:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model"])
    model = MSBACLIP(cfg, PromptTable(**header["prompts"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model, header.get("extra", {})


def images_to_tensor(images: np.ndarray | Sequence, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) unit-interval array -> (B, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)

"""Desk-scale dual-branch backbone.

The CNN branch is three strided 3x3 conv stages landing on the patch grid.
The transformer branch embeds non-overlapping patches, prepends a class token
(index 0) and runs ``num_blocks`` pre-activation-free blocks. After each block
the branches exchange features once in each direction:

    f      <- f + reshape(patch_tokens @ W_t2c)      (D -> fc, onto the grid)
    tokens <- tokens + [0; flatten(f) @ W_c2t]       (fc -> D, patch tokens only)

Both updates read the pre-exchange values. There is no positional embedding;
patch tokens pick up position through the convolutional features, which also
lets the same weights run at other input scales.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from camforge import fusion
from camforge.imaging import resize_bilinear
from camforge.tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    divide,
    getitem,
    layer_norm,
    linear,
    load_tensor,
    matmul,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    save_tensor,
    softmax_rows,
    stack,
    swapaxes,
    to_bytes,
    transpose,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    num_blocks: int = 4
    num_heads: int = 4
    embed_dim: int = 64
    cnn_channels: int = 32
    num_classes: int = 3  # foreground classes, S - 1
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.patch_size not in (1, 2, 4, 8):
            raise ConfigError(f"patch_size must be 1, 2, 4 or 8 (three stride-1/2 conv stages), got {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.cnn_channels < 2:
            raise ConfigError("cnn_channels must be >= 2")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def strides(self) -> tuple[int, int, int]:
        k = int(math.log2(self.patch_size))
        return tuple(2 if i < k else 1 for i in range(3))


MINIMAL_CONFIG = ModelConfig(image_size=16, patch_size=8, num_blocks=1, num_heads=1,
                             embed_dim=8, cnn_channels=4, num_classes=2, seed=0)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def replace(self, **updates: Tensor) -> "ModelState":
        return ModelState(self.config, {**self.params, **updates})


@dataclass(frozen=True)
class ForwardArtifacts:
    f: Tensor           # (n, fc, g, g)
    cam: Tensor         # (n, S-1, g, g)
    tokens: Tensor      # (n, 1+N, D)
    attention: Tensor   # (n, B, H, 1+N, 1+N)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    fc, d, p, c = cfg.cnn_channels, cfg.embed_dim, cfg.patch_size, cfg.num_classes
    half = fc // 2
    shapes = {
        "conv1.w": (half, 3, 3, 3), "conv1.b": (half,),
        "conv2.w": (fc, half, 3, 3), "conv2.b": (fc,),
        "conv3.w": (fc, fc, 3, 3), "conv3.b": (fc,),
        "embed.w": (3 * p * p, d), "embed.b": (d,),
        "cls_token": (1, d),
    }
    for b in range(cfg.num_blocks):
        shapes.update({
            f"blocks.{b}.qkv.w": (d, 3 * d), f"blocks.{b}.qkv.b": (3 * d,),
            f"blocks.{b}.proj.w": (d, d), f"blocks.{b}.proj.b": (d,),
            f"blocks.{b}.mlp1.w": (d, 2 * d), f"blocks.{b}.mlp1.b": (2 * d,),
            f"blocks.{b}.mlp2.w": (2 * d, d), f"blocks.{b}.mlp2.b": (d,),
            f"blocks.{b}.t2c.w": (d, fc),
            f"blocks.{b}.c2t.w": (fc, d),
        })
    shapes.update({"cam.w": (c, fc), "head.w": (d, c), "head.b": (c,)})
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("conv"):
        return int(np.prod(shape[1:]))
    if name == "cam.w":
        return shape[1]
    return shape[0]


def init(config: ModelConfig) -> ModelState:
    """Uniform(-a, a) weights with a = gain * sqrt(3 / fan_in); biases zero.

    The key projection of every block is initialised as a copy of the query
    projection, so untrained attention is a token-similarity kernel rather
    than noise. There is no pretraining to provide that structure otherwise.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "cls_token":
            arr = rng.uniform(-0.05, 0.05, size=shape)
        else:
            gain = 1.0
            if name.startswith("conv") or name.endswith("mlp1.w"):
                gain = math.sqrt(2.0)
            elif ".t2c." in name or ".c2t." in name:
                gain = 0.5
            elif name.endswith("proj.w") or name.endswith("mlp2.w"):
                gain = 0.5
            a = gain * math.sqrt(3.0 / _fan_in(name, shape))
            arr = rng.uniform(-a, a, size=shape)
            if name.endswith("qkv.w"):
                # keys start equal to queries: attention begins as token similarity
                d = config.embed_dim
                arr[:, d:2 * d] = arr[:, :d]
        params[name] = parameter(arr)
    return ModelState(config, params)


def patchify(images: Tensor, patch: int) -> Tensor:
    """(n, 3, S, S) -> (n, N, 3*p*p) with patches enumerated row-major."""
    n, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = reshape(images, (n, c, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (n, gh * gw, c * patch * patch))


def cam_head(state: ModelState, f) -> Tensor:
    """M_s[i, j] = sum_c w_s[c] * f[c, i, j] for every foreground class s."""
    f = f if isinstance(f, Tensor) else Tensor(f)
    fc, gh, gw = f.shape[-3:]
    flat = reshape(f, f.shape[:-2] + (gh * gw,))
    out = matmul(state["cam.w"], flat)
    return reshape(out, out.shape[:-1] + (gh, gw))


def class_token_logits(state: ModelState, tokens: Tensor) -> Tensor:
    return linear(getitem(tokens, (..., 0, slice(None))), state["head.w"], state["head.b"])


def _block(state: ModelState, b: int, t: Tensor, f: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    cfg = state.config
    n, tlen, d = t.shape
    h = cfg.num_heads
    hd = d // h
    p = f"blocks.{b}."
    qkv = linear(layer_norm(t), state[p + "qkv.w"], state[p + "qkv.b"])
    qkv = transpose(reshape(qkv, (n, tlen, 3, h, hd)), (2, 0, 3, 1, 4))  # (3, n, H, T, hd)
    q, k, v = getitem(qkv, 0), getitem(qkv, 1), getitem(qkv, 2)
    scores = divide(matmul(q, swapaxes(k, -1, -2)), math.sqrt(hd))
    attn = softmax_rows(scores)
    mixed = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (n, tlen, d))
    t = add(t, linear(mixed, state[p + "proj.w"], state[p + "proj.b"]))
    hidden = relu(linear(layer_norm(t), state[p + "mlp1.w"], state[p + "mlp1.b"]))
    t = add(t, linear(hidden, state[p + "mlp2.w"], state[p + "mlp2.b"]))

    fc, gh, gw = f.shape[1:]
    patches = getitem(t, (slice(None), slice(1, None), slice(None)))
    to_cnn = reshape(swapaxes(matmul(patches, state[p + "t2c.w"]), -1, -2), (n, fc, gh, gw))
    f_flat = swapaxes(reshape(f, (n, fc, gh * gw)), -1, -2)
    to_tok = matmul(f_flat, state[p + "c2t.w"])
    to_tok = concat([Tensor(np.zeros((n, 1, d))), to_tok], axis=1)
    return add(t, to_tok), add(f, to_cnn), attn


def forward(state: ModelState, images, *, check_size: bool = True) -> ForwardArtifacts:
    """Run both branches on (3, S, S) or (n, 3, S, S) images.

    Outputs always carry a leading batch axis.
    """
    cfg = state.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected image of shape (3, S, S) or (n, 3, S, S), got {x.shape}")
    size = x.shape[-1]
    if x.shape[-2] != size:
        raise ValueError(f"images must be square, got {x.shape[-2:]}")
    if check_size and size != cfg.image_size:
        raise ValueError(f"image size {size} does not match config image_size {cfg.image_size}")
    if size % cfg.patch_size:
        raise ValueError(f"image size {size} not divisible by patch_size {cfg.patch_size}")
    n = x.shape[0]
    s1, s2, s3 = cfg.strides

    f = relu(conv2d(x, state["conv1.w"], state["conv1.b"], stride=s1, pad=1))
    f = relu(conv2d(f, state["conv2.w"], state["conv2.b"], stride=s2, pad=1))
    f = relu(conv2d(f, state["conv3.w"], state["conv3.b"], stride=s3, pad=1))

    tok = linear(patchify(x, cfg.patch_size), state["embed.w"], state["embed.b"])
    cls = mul(Tensor(np.ones((n, 1, 1))), state["cls_token"])
    t = concat([cls, tok], axis=1)

    maps = []
    for b in range(cfg.num_blocks):
        t, f, attn = _block(state, b, t, f)
        maps.append(attn)
    attention = stack(maps, axis=1)
    return ForwardArtifacts(f=f, cam=cam_head(state, f), tokens=t, attention=attention)


def refined_cam(state: ModelState, image, *, check_size: bool = True) -> np.ndarray:
    """Inference-path CAM for one image: A* . M at the image's own grid. No noise."""
    with no_grad():
        art = forward(state, image, check_size=check_size)
        fused = fusion.fuse(art.attention)
        return fusion.refine_cam(fused.A_star, art.cam).data[0].copy()


def infer_multiscale(state: ModelState, image, scales) -> np.ndarray:
    """Average of per-scale refined CAMs, each resized back to the base grid."""
    cfg = state.config
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    scales = list(scales)
    if not scales:
        raise ValueError("need at least one scale")
    for s in scales:
        if s < cfg.patch_size or s % cfg.patch_size:
            raise ValueError(f"scale {s} not a positive multiple of patch_size {cfg.patch_size}")
    base = cfg.grid
    total = None
    for s in scales:
        cam = refined_cam(state, resize_bilinear(img, s), check_size=False)
        cam = resize_bilinear(cam, base)
        total = cam if total is None else total + cam
    return total / len(scales)


def state_bytes(state: ModelState) -> bytes:
    return b"".join(name.encode() + to_bytes(t) for name, t in state.params.items())


def save_checkpoint(state: ModelState, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# camforge checkpoint"]
    lines += [f"config.{k} = {v}" for k, v in asdict(state.config).items()]
    for name, t in state.params.items():
        fname = f"{name}.cftn"
        save_tensor(directory / fname, t)
        lines.append(f"tensor {name} = {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> ModelState:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest}")
    cfg_vals: dict[str, int] = {}
    files: dict[str, str] = {}
    for raw in manifest.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("config."):
            cfg_vals[key[len("config."):]] = int(value)
        elif key.startswith("tensor "):
            files[key[len("tensor "):]] = value
        else:
            raise ValueError(f"{manifest}: unrecognised line {raw!r}")
    cfg = ModelConfig(**cfg_vals)
    expected = param_shapes(cfg)
    if set(files) != set(expected):
        missing = sorted(set(expected) - set(files))
        raise ValueError(f"{manifest}: tensor list does not match config (missing {missing})")
    params = {}
    for name, shape in expected.items():
        t = load_tensor(directory / files[name])
        if t.shape != shape:
            raise ValueError(f"{directory / files[name]}: shape {t.shape}, expected {shape}")
        params[name] = parameter(t.data)
    return ModelState(cfg, params)

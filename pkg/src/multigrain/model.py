"""Convolutional trunk, GeM pooling and classifier head assembled into one network."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import mgt
from . import tensor as T
from .augment import eval_view
from .gem import GemConfig, GemPool, gem_numpy
from .objectives import ClassifierHead, MarginState
from .tensor import Tensor

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class TrunkConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    batch_norm: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValueError("trunk needs at least one stage with positive width")

    @property
    def dim(self) -> int:
        return self.channels[-1]

    def output_extent(self, resolution: int) -> int:
        s = resolution
        for _ in self.channels[1:]:
            s = (s + 2 * (self.kernel // 2) - self.kernel) // 2 + 1
        return s

    @property
    def min_resolution(self) -> int:
        return 2 ** (len(self.channels) - 1)


class Trunk:
    """Stage i: 3x3 conv (stride 1 for the first stage, 2 afterwards) + optional BN + ReLU."""

    def __init__(self, cfg: TrunkConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.bn: list[tuple[Tensor, Tensor]] = []
        self.running: list[list[np.ndarray]] = []
        c_in, k = 3, cfg.kernel
        for c_out in cfg.channels:
            fan_in = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
            self.weights.append(Tensor(w.astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))
            if cfg.batch_norm:
                self.bn.append((Tensor(np.ones(c_out, dtype=dtype), requires_grad=True),
                                Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)))
                self.running.append([np.zeros(c_out), np.ones(c_out)])
            c_in = c_out

    def parameters(self) -> list[Tensor]:
        params = self.weights + self.biases
        for g, b in self.bn:
            params += [g, b]
        return params

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        """Channel-last input (N,H,W,3) -> activation maps (N,C,h,w)."""
        pad = self.cfg.kernel // 2
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.conv2d_nhwc(h, w, b, stride=1 if i == 0 else 2, padding=pad)
            if self.cfg.batch_norm:
                h = self._bn(h, i, training)
            h = T.relu(h)
        return T.permute(h, (0, 3, 1, 2))

    def _bn(self, h: Tensor, i: int, training: bool, momentum: float = 0.1) -> Tensor:
        gamma, beta = self.bn[i]
        if training:
            out, mu, var = T.batch_norm(h, gamma, beta)
            run = self.running[i]
            run[0] = (1 - momentum) * run[0] + momentum * mu
            run[1] = (1 - momentum) * run[1] + momentum * var
            return out
        mu, var = self.running[i]
        scale = gamma.data / np.sqrt(var + 1e-5)
        shift = beta.data - mu * scale
        return Tensor(h.data * scale + shift)


def to_input(images: np.ndarray, dtype=np.float64) -> Tensor:
    """N x H x W x 3 pixels in [0, 1] -> normalized channel-last tensor."""
    x = (np.asarray(images, dtype=np.float64) - PIXEL_MEAN) / PIXEL_STD
    return Tensor(np.ascontiguousarray(x, dtype=dtype))


@dataclass
class MultiGrainNet:
    trunk_cfg: TrunkConfig
    gem_cfg: GemConfig
    margin: MarginState
    n_classes: int
    seed: int = 0
    dtype: str = "float64"
    trunk: Trunk = field(init=False)
    pool: GemPool = field(init=False)
    head: ClassifierHead = field(init=False)
    beta: Tensor = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x1A17]))
        dt = np.dtype(self.dtype)
        self.trunk = Trunk(self.trunk_cfg, rng, dt)
        self.pool = GemPool(self.gem_cfg)
        self.head = ClassifierHead.init(self.n_classes, self.trunk_cfg.dim, rng, dt)
        self.beta = Tensor(np.array(self.margin.beta), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        """Parameters updated with the main learning rate (beta has its own)."""
        return self.trunk.parameters() + [self.head.W] + self.pool.parameters()

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.trunk.weights, self.trunk.biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        for i, (g, b) in enumerate(self.trunk.bn):
            out[f"bn{i}.gamma"] = g
            out[f"bn{i}.beta"] = b
            out[f"bn{i}.running_mean"] = Tensor(self.trunk.running[i][0])
            out[f"bn{i}.running_var"] = Tensor(self.trunk.running[i][1])
        out["head.W"] = self.head.W
        out["gem.p"] = self.pool.p
        out["margin.beta"] = self.beta
        return out

    def embed_tensor(self, images: np.ndarray, training: bool = False, p_star: float | None = None) -> Tensor:
        fmap = self.trunk(to_input(images, np.dtype(self.dtype)), training=training)
        return self.pool(fmap, p_star=p_star)

    def feature_maps(self, images: np.ndarray, batch: int = 64) -> list[np.ndarray]:
        """Final activation maps (numpy), computed without recording."""
        out = []
        for start in range(0, len(images), batch):
            chunk = np.asarray(images[start : start + batch])
            out.extend(self.trunk(to_input(chunk, np.dtype(self.dtype))).data.astype(np.float64))
        return out

    def embed_images(self, images, resolution: int, base_resolution: int, p_star: float | None = None,
                     whitening=None, batch: int = 64) -> np.ndarray:
        """Evaluation embeddings: protocol resize, trunk, GeM with p* (default: trained p)."""
        if resolution < self.trunk_cfg.min_resolution:
            raise ValueError(f"resolution {resolution} below trunk minimum {self.trunk_cfg.min_resolution}")
        p = float(self.pool.p.data) if p_star is None else float(p_star)
        views = [eval_view(img, resolution, base_resolution) for img in images]
        emb = []
        for start in range(0, len(views), batch):
            group = views[start : start + batch]
            if len({v.shape for v in group}) == 1:
                fmaps = self.feature_maps(np.stack(group), batch)
                emb.extend(gem_numpy(np.stack(fmaps), p, self.gem_cfg.epsilon))
            else:
                for v in group:
                    emb.append(gem_numpy(self.feature_maps(v[None])[0], p, self.gem_cfg.epsilon))
        emb = np.asarray(emb)
        if whitening is not None:
            from .whitening import apply_whitening

            emb = apply_whitening(emb, whitening)
        return emb

    def classify(self, embeddings: np.ndarray) -> np.ndarray:
        return np.argmax(self.head.scores_numpy(embeddings), axis=1)

    # ------------------------------------------------------------ persistence

    def config_dict(self) -> dict:
        return {
            "trunk": {"channels": list(self.trunk_cfg.channels), "kernel": self.trunk_cfg.kernel,
                      "batch_norm": self.trunk_cfg.batch_norm},
            "gem": asdict(self.gem_cfg),
            "margin": asdict(self.margin),
            "n_classes": self.n_classes,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    def save(self, directory, extra: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, t in self.named_tensors().items():
            fname = f"{name}.mgt"
            mgt.save(d / fname, t.data)
            files[name] = fname
        manifest = {"format": "multigrain-checkpoint/1", "config": self.config_dict(), "tensors": files}
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MultiGrainNet":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        cfg = manifest["config"]
        gem_cfg = GemConfig(**cfg["gem"])
        net = cls(TrunkConfig(**cfg["trunk"]), gem_cfg, MarginState(**cfg["margin"]), cfg["n_classes"],
                  cfg["seed"], cfg["dtype"])
        tensors = net.named_tensors()
        for name, fname in manifest["tensors"].items():
            arr = mgt.load(d / fname)
            if name.startswith("bn") and name.endswith(("running_mean", "running_var")):
                i = int(name[2 : name.index(".")])
                net.trunk.running[i][0 if name.endswith("mean") else 1] = arr
                continue
            tensors[name].data = arr.astype(tensors[name].data.dtype).reshape(tensors[name].shape)
        return net

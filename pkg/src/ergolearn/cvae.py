"""Conditional VAE on (pose, image) pairs.

Encoder: conv stack on the image, flattened and concatenated with the pose,
then a dense trunk emitting [mu, raw]; sigma = exp(raw) with raw clamped to
a finite band so the KL and the entropy head stay bounded. Decoder: dense
trunk on [z, pose] emitting a flattened prediction plus one scalar
log-variance, the prediction mirrored back to image shape through the
adjoint transposed-conv stack.

The training objective (maximized) is

    total = recon_loglik - beta * KL(q || N(0, I)) + gamma * cond_loglik

where cond_loglik re-decodes the *same* latent sample at a permuted pose
and scores it against the permuted image. All gradients are hand-derived;
``loss_and_grad`` returns gradients of the negated total for minimizers.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .nn import Conv2d, ConvTranspose2d, Dense, tree_map

__all__ = [
    "Architecture",
    "CVAE",
    "DecoderOutput",
    "LatentGaussian",
    "LossBreakdown",
    "ModelParams",
    "decode",
    "encode",
    "gaussian_kl_to_standard",
    "init_model",
    "loss",
    "loss_and_grad",
    "sample_latent",
]


@dataclass(frozen=True)
class Architecture:
    """Network shape descriptor. Defaults follow the 64x64 desk scale."""

    image_shape: tuple = (3, 64, 64)
    state_dim: int = 3
    latent_dim: int = 16
    conv: tuple = ((10, 3, 2), (10, 3, 2), (20, 5, 3))  # (c_out, kernel, stride)
    enc_hidden: tuple = (512, 256)
    dec_hidden: tuple = (256, 512)
    raw_clip: tuple = (-8.0, 4.0)  # clamp band for log-sigma and log-variance

    def to_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "state_dim": self.state_dim,
            "latent_dim": self.latent_dim,
            "conv": [list(c) for c in self.conv],
            "enc_hidden": list(self.enc_hidden),
            "dec_hidden": list(self.dec_hidden),
            "raw_clip": list(self.raw_clip),
        }

    @staticmethod
    def from_dict(d: dict) -> "Architecture":
        return Architecture(
            image_shape=tuple(d["image_shape"]),
            state_dim=int(d["state_dim"]),
            latent_dim=int(d["latent_dim"]),
            conv=tuple(tuple(c) for c in d["conv"]),
            enc_hidden=tuple(d["enc_hidden"]),
            dec_hidden=tuple(d["dec_hidden"]),
            raw_clip=tuple(d["raw_clip"]),
        )


@dataclass(frozen=True)
class LatentGaussian:
    """Diagonal-Gaussian posterior (mu, sigma), sigma > 0 elementwise."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class DecoderOutput:
    prediction: np.ndarray  # (C, H, W)
    log_variance: float


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    reconstruction: float
    kl: float
    conditional_reconstruction: float
    beta: float
    gamma: float


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter snapshot plus its architecture descriptor."""

    arch: Architecture
    values: dict


class CVAE:
    def __init__(self, arch: Architecture):
        self.arch = arch
        C, H, W = arch.image_shape
        self.enc_conv = []
        hw = (H, W)
        c_prev = C
        shapes = [hw]
        for i, (c_out, k, s) in enumerate(arch.conv):
            layer = Conv2d(c_prev, c_out, k, s, relu=(i < len(arch.conv) - 1))
            layer.input_hw = hw
            hw = layer.out_hw(hw)
            if hw[0] < 1 or hw[1] < 1:
                raise ValueError(f"conv stack collapses image {arch.image_shape} at layer {i}")
            shapes.append(hw)
            self.enc_conv.append(layer)
            c_prev = c_out
        self.conv_out_shape = (c_prev, hw[0], hw[1]) if arch.conv else arch.image_shape
        self.flat_dim = int(np.prod(self.conv_out_shape))

        dims = [self.flat_dim + arch.state_dim, *arch.enc_hidden, 2 * arch.latent_dim]
        self.enc_mlp = [
            Dense(dims[i], dims[i + 1], relu=(i < len(dims) - 2)) for i in range(len(dims) - 1)
        ]
        ddims = [arch.latent_dim + arch.state_dim, *arch.dec_hidden, self.flat_dim + 1]
        self.dec_mlp = [
            Dense(ddims[i], ddims[i + 1], relu=(i < len(ddims) - 2)) for i in range(len(ddims) - 1)
        ]
        self.dec_conv = []
        n = len(self.enc_conv)
        for j, enc_layer in enumerate(reversed(self.enc_conv)):
            layer = ConvTranspose2d(
                enc_layer.c_out,
                enc_layer.c_in,
                enc_layer.k,
                enc_layer.stride,
                out_hw=shapes[n - 1 - j],
                relu=(j < n - 1),
            )
            layer.input_hw = shapes[n - j]
            self.dec_conv.append(layer)

    def init_values(self, rng: np.random.Generator, dtype=np.float64) -> dict:
        return {
            "enc_conv": [l.init(rng, dtype) for l in self.enc_conv],
            "enc_mlp": [l.init(rng, dtype) for l in self.enc_mlp],
            "dec_mlp": [l.init(rng, dtype) for l in self.dec_mlp],
            "dec_conv": [l.init(rng, dtype) for l in self.dec_conv],
        }

    # -- encoder ---------------------------------------------------------

    def enc_forward(self, v: dict, states: np.ndarray, images: np.ndarray):
        h = images
        conv_caches = []
        for layer, p in zip(self.enc_conv, v["enc_conv"]):
            h, c = layer.forward(p, h)
            conv_caches.append(c)
        flat = h.reshape(h.shape[0], -1)
        h2 = np.concatenate([flat, states], axis=1)
        mlp_caches = []
        for layer, p in zip(self.enc_mlp, v["enc_mlp"]):
            h2, c = layer.forward(p, h2)
            mlp_caches.append(c)
        d = self.arch.latent_dim
        mu = h2[:, :d]
        raw = h2[:, d:]
        raw_c = np.clip(raw, *self.arch.raw_clip)
        return mu, raw_c, (conv_caches, mlp_caches, raw)

    def enc_backward(self, v: dict, caches, gmu: np.ndarray, graw: np.ndarray):
        conv_caches, mlp_caches, raw = caches
        lo, hi = self.arch.raw_clip
        graw = graw * ((raw > lo) & (raw < hi))
        g = np.concatenate([gmu, graw], axis=1)
        gmlp = [None] * len(self.enc_mlp)
        for i in range(len(self.enc_mlp) - 1, -1, -1):
            g, gmlp[i] = self.enc_mlp[i].backward(v["enc_mlp"][i], mlp_caches[i], g)
        gflat = g[:, : self.flat_dim]
        gh = gflat.reshape((-1,) + self.conv_out_shape)
        gconv = [None] * len(self.enc_conv)
        for i in range(len(self.enc_conv) - 1, -1, -1):
            gh, gconv[i] = self.enc_conv[i].backward(v["enc_conv"][i], conv_caches[i], gh)
        return {"enc_conv": gconv, "enc_mlp": gmlp}

    # -- decoder ---------------------------------------------------------

    def dec_forward(self, v: dict, z: np.ndarray, states: np.ndarray):
        h = np.concatenate([z, states], axis=1)
        mlp_caches = []
        for layer, p in zip(self.dec_mlp, v["dec_mlp"]):
            h, c = layer.forward(p, h)
            mlp_caches.append(c)
        flat = h[:, : self.flat_dim]
        lv_raw = h[:, self.flat_dim]
        lv = np.clip(lv_raw, *self.arch.raw_clip)
        g = flat.reshape((-1,) + self.conv_out_shape)
        conv_caches = []
        for layer, p in zip(self.dec_conv, v["dec_conv"]):
            g, c = layer.forward(p, g)
            conv_caches.append(c)
        return g, lv, (mlp_caches, conv_caches, lv_raw)

    def dec_logvar(self, v: dict, z: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Log-variance head only (skips the image mirror); used for entropy."""
        h = np.concatenate([z, states], axis=1)
        for layer, p in zip(self.dec_mlp, v["dec_mlp"]):
            h, _ = layer.forward(p, h)
        return np.clip(h[:, self.flat_dim], *self.arch.raw_clip)

    def dec_backward(self, v: dict, caches, gpred: np.ndarray, glv: np.ndarray):
        mlp_caches, conv_caches, lv_raw = caches
        lo, hi = self.arch.raw_clip
        g = gpred
        gconv = [None] * len(self.dec_conv)
        for i in range(len(self.dec_conv) - 1, -1, -1):
            g, gconv[i] = self.dec_conv[i].backward(v["dec_conv"][i], conv_caches[i], g)
        gflat = g.reshape(g.shape[0], -1)
        glv = glv * ((lv_raw > lo) & (lv_raw < hi))
        gh = np.concatenate([gflat, glv[:, None]], axis=1)
        gmlp = [None] * len(self.dec_mlp)
        for i in range(len(self.dec_mlp) - 1, -1, -1):
            gh, gmlp[i] = self.dec_mlp[i].backward(v["dec_mlp"][i], mlp_caches[i], gh)
        gz = gh[:, : self.arch.latent_dim]
        return gz, {"dec_mlp": gmlp, "dec_conv": gconv}


@lru_cache(maxsize=16)
def _model(arch: Architecture) -> CVAE:
    return CVAE(arch)


def model_for(params: ModelParams) -> CVAE:
    return _model(params.arch)


def init_model(arch: Architecture, rng: np.random.Generator, dtype=np.float64) -> ModelParams:
    return ModelParams(arch=arch, values=_model(arch).init_values(rng, dtype))


def _as_batch(params: ModelParams, pose, frame):
    dtype = params.values["enc_mlp"][0]["W"].dtype
    img = np.asarray(getattr(frame, "image", frame), dtype=dtype)
    if img.shape != params.arch.image_shape:
        raise ValueError(f"frame shape {img.shape} does not match architecture {params.arch.image_shape}")
    st = np.asarray(pose, dtype=dtype).reshape(-1)
    if st.shape[0] != params.arch.state_dim:
        raise ValueError(f"pose length {st.shape[0]} != state_dim {params.arch.state_dim}")
    return st[None], img[None]


def encode(params: ModelParams, pose, frame) -> LatentGaussian:
    """Posterior q(z | pose, image) as a diagonal Gaussian."""
    st, img = _as_batch(params, pose, frame)
    mu, raw, _ = model_for(params).enc_forward(params.values, st, img)
    return LatentGaussian(mu=mu[0].astype(float), sigma=np.exp(raw[0]).astype(float))


def encode_batch(params: ModelParams, states: np.ndarray, images: np.ndarray):
    """Batched posterior parameters: (mu, sigma) as (B, d) arrays."""
    mu, raw, _ = model_for(params).enc_forward(params.values, states, images)
    return mu, np.exp(raw)


def encode_one_image_many_states(params: ModelParams, image: np.ndarray, states: np.ndarray):
    """Posterior means for one image paired with many poses.

    Runs the conv trunk once and fans the flattened features across the
    pose batch; identical result to encode_batch on the tiled image.
    """
    model = model_for(params)
    v = params.values
    dtype = v["enc_mlp"][0]["W"].dtype
    h = np.asarray(image, dtype=dtype)[None]
    for layer, p in zip(model.enc_conv, v["enc_conv"]):
        h, _ = layer.forward(p, h)
    flat = np.broadcast_to(h.reshape(1, -1), (states.shape[0], model.flat_dim))
    h2 = np.concatenate([flat, np.asarray(states, dtype=dtype)], axis=1)
    for layer, p in zip(model.enc_mlp, v["enc_mlp"]):
        h2, _ = layer.forward(p, h2)
    d = params.arch.latent_dim
    return h2[:, :d], np.exp(np.clip(h2[:, d:], *params.arch.raw_clip))


def sample_latent(latent: LatentGaussian, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw mu + sigma * eps, eps ~ N(0, I)."""
    eps = rng.standard_normal(latent.mu.shape[0])
    return latent.mu + latent.sigma * eps


def decode(params: ModelParams, z, pose) -> DecoderOutput:
    """Prediction g(z, pose) plus scalar log-variance."""
    dtype = params.values["enc_mlp"][0]["W"].dtype
    z = np.asarray(z, dtype=dtype).reshape(-1)
    if z.shape[0] != params.arch.latent_dim:
        raise ValueError(f"latent length {z.shape[0]} != latent_dim {params.arch.latent_dim}")
    st = np.asarray(pose, dtype=dtype).reshape(1, -1)
    pred, lv, _ = model_for(params).dec_forward(params.values, z[None], st)
    pred = pred.reshape(params.arch.image_shape)
    if not (np.all(np.isfinite(pred)) and np.isfinite(lv[0])):
        raise ValueError("decoder produced non-finite output")
    return DecoderOutput(prediction=pred, log_variance=float(lv[0]))


def decode_batch(params: ModelParams, z: np.ndarray, states: np.ndarray):
    pred, lv, _ = model_for(params).dec_forward(params.values, z, states)
    return pred, lv


def gaussian_kl_to_standard(latent: LatentGaussian) -> float:
    """Closed-form KL( N(mu, diag sigma^2) || N(0, I) )."""
    sigma = np.asarray(latent.sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    mu = np.asarray(latent.mu, dtype=float)
    return float(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)))


def _stack_pairs(params: ModelParams, batch):
    dtype = params.values["enc_mlp"][0]["W"].dtype
    states = np.stack([np.asarray(p, dtype=dtype).reshape(-1) for p, _ in batch])
    images = np.stack([np.asarray(getattr(f, "image", f), dtype=dtype) for _, f in batch])
    return states, images


def _loglik_terms(images, pred, lv, gaussian: bool):
    B = images.shape[0]
    D = int(np.prod(images.shape[1:]))
    resid = images - pred
    sq = np.sum(resid.reshape(B, -1) ** 2, axis=1)
    if gaussian:
        ll = -0.5 * D * math.log(2.0 * math.pi) - 0.5 * D * lv - 0.5 * np.exp(-lv) * sq
    else:
        ll = -0.5 * sq
    return ll, resid, sq, D


def loss_and_grad(
    params: ModelParams,
    batch,
    hat_batch,
    beta: float,
    gamma: float,
    rng: np.random.Generator,
    gaussian_loglik: bool = True,
):
    """Augmented objective and gradients of its negation.

    ``batch`` and ``hat_batch`` are equal-length sequences of (pose, frame)
    pairs; hat_batch is a within-batch permutation supplying the alternate
    conditioning poses. One latent sample per item is shared by the
    end-to-end and conditional reconstruction terms.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    if len(hat_batch) != len(batch):
        raise ValueError(f"hat_batch length {len(hat_batch)} != batch length {len(batch)}")
    model = model_for(params)
    v = params.values
    X, Y = _stack_pairs(params, batch)
    Xh, Yh = _stack_pairs(params, hat_batch)
    B = X.shape[0]
    d = params.arch.latent_dim
    dtype = X.dtype

    mu, raw, enc_caches = model.enc_forward(v, X, Y)
    sigma = np.exp(raw)
    eps = rng.standard_normal((B, d)).astype(dtype)
    z = mu + sigma * eps

    pred, lv, dec_c1 = model.dec_forward(v, z, X)
    pred_h, lv_h, dec_c2 = model.dec_forward(v, z, Xh)

    ll, resid, sq, D = _loglik_terms(Y, pred, lv, gaussian_loglik)
    ll_h, resid_h, sq_h, _ = _loglik_terms(Yh, pred_h, lv_h, gaussian_loglik)
    kl_each = 0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * raw, axis=1)

    recon = float(np.mean(ll))
    cond = float(np.mean(ll_h))
    kl = float(np.mean(kl_each))
    total = recon - beta * kl + gamma * cond
    breakdown = LossBreakdown(
        total=total,
        reconstruction=recon,
        kl=kl,
        conditional_reconstruction=cond,
        beta=float(beta),
        gamma=float(gamma),
    )

    # gradients of +total, negated at the end
    if gaussian_loglik:
        w = np.exp(-lv)
        gpred1 = (w[:, None, None, None] * resid) / B
        glv1 = (-0.5 * D + 0.5 * w * sq) / B
        w_h = np.exp(-lv_h)
        gpred2 = gamma * (w_h[:, None, None, None] * resid_h) / B
        glv2 = gamma * (-0.5 * D + 0.5 * w_h * sq_h) / B
    else:
        gpred1 = resid / B
        glv1 = np.zeros(B, dtype=dtype)
        gpred2 = gamma * resid_h / B
        glv2 = np.zeros(B, dtype=dtype)

    gz1, gdec1 = model.dec_backward(v, dec_c1, gpred1, glv1)
    gz2, gdec2 = model.dec_backward(v, dec_c2, gpred2, glv2)
    gz = gz1 + gz2
    gmu = gz - beta * mu / B
    graw = gz * sigma * eps - beta * (sigma**2 - 1.0) / B
    genc = model.enc_backward(v, enc_caches, gmu, graw)

    def add_lists(a, b):
        return [{k: la[k] + lb[k] for k in la} for la, lb in zip(a, b)]

    grads = {
        "enc_conv": genc["enc_conv"],
        "enc_mlp": genc["enc_mlp"],
        "dec_mlp": add_lists(gdec1["dec_mlp"], gdec2["dec_mlp"]),
        "dec_conv": add_lists(gdec1["dec_conv"], gdec2["dec_conv"]),
    }
    grads = tree_map(lambda a: -a, grads)
    return breakdown, grads


def loss(params, batch, hat_batch, beta, gamma, rng, gaussian_loglik: bool = True) -> LossBreakdown:
    breakdown, _ = loss_and_grad(params, batch, hat_batch, beta, gamma, rng, gaussian_loglik)
    return breakdown

"""CNN front end + recurrent cell (standard LSTM or H-infinity variant) + sigmoid head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


class ModelConfigError(ValueError):
    pass


CELL_MODES = ("standard", "h_infinity")
LAMBDA_MODES = ("scalar", "per_unit")
GATES = ("i", "f", "o", "c")


@dataclass
class ModelConfig:
    conv_blocks: tuple = (16, 32, 64)
    hidden_size: int = 128
    cell_mode: str = "h_infinity"
    lambda_mode: str = "scalar"
    n_mels: int = 64
    n_frames: int = 38

    def __post_init__(self):
        self.conv_blocks = tuple(int(c) for c in self.conv_blocks)

    def problems(self) -> list:
        out = []
        if not self.conv_blocks or any(c <= 0 for c in self.conv_blocks):
            out.append("model.conv_blocks must be a non-empty list of positive channel counts")
        if self.hidden_size <= 0:
            out.append("model.hidden_size must be positive")
        if self.cell_mode not in CELL_MODES:
            out.append(f"model.cell_mode must be one of {CELL_MODES}, got {self.cell_mode!r}")
        if self.lambda_mode not in LAMBDA_MODES:
            out.append(f"model.lambda_mode must be one of {LAMBDA_MODES}, got {self.lambda_mode!r}")
        if self.conv_blocks and self.n_mels % (2 ** len(self.conv_blocks)):
            out.append(f"model.n_mels ({self.n_mels}) must be divisible by "
                       f"2**{len(self.conv_blocks)} = {2 ** len(self.conv_blocks)}")
        if self.n_frames <= 0:
            out.append("model.n_frames must be positive")
        return out

    @property
    def reduction(self) -> int:
        return 2 ** len(self.conv_blocks)

    @property
    def padded_frames(self) -> int:
        r = self.reduction
        return -(-self.n_frames // r) * r

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = list(self.conv_blocks)
        return d


@dataclass
class LstmParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_c: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor
    K_filter: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_i.shape[0]

    def robustness_coefficient(self) -> Tensor:
        """lambda_h = sigmoid(K_filter), in (0, 1) by construction."""
        return ad.sigmoid(self.K_filter)


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype=np.float32):
        return cls(Tensor(np.zeros((batch, hidden), dtype=dtype)),
                   Tensor(np.zeros((batch, hidden), dtype=dtype)))


def _gate(x_t, h_prev, p: LstmParams, g: str, act):
    W, U, b = getattr(p, f"W_{g}"), getattr(p, f"U_{g}"), getattr(p, f"b_{g}")
    return act(ad.add(ad.dense(x_t, W, b), ad.matmul(h_prev, U)))


def _check_step_shapes(x_t: Tensor, state: LstmState, p: LstmParams):
    if x_t.data.ndim != 2 or x_t.shape[1] != p.W_i.shape[0]:
        raise ValueError(f"step input shape {x_t.shape} does not match W_i {p.W_i.shape}")
    expect = (x_t.shape[0], p.hidden_size)
    if state.h.shape != expect or state.c.shape != expect:
        raise ValueError(f"state shapes h={state.h.shape}, c={state.c.shape}; expected {expect}")


def standard_lstm_step(x_t: Tensor, state: LstmState, p: LstmParams,
                       forget_gate=None, input_gate_scale=None) -> LstmState:
    """One step of the classic LSTM cell.

    ``forget_gate`` replaces the computed f_t and ``input_gate_scale``
    multiplies i_t; both exist to pin gates when comparing cell variants.
    """
    _check_step_shapes(x_t, state, p)
    i = _gate(x_t, state.h, p, "i", ad.sigmoid)
    f = _gate(x_t, state.h, p, "f", ad.sigmoid) if forget_gate is None else forget_gate
    o = _gate(x_t, state.h, p, "o", ad.sigmoid)
    c_tilde = _gate(x_t, state.h, p, "c", ad.tanh)
    if input_gate_scale is not None:
        i = ad.mul(input_gate_scale, i)
    c = ad.add(ad.mul(f, state.c), ad.mul(i, c_tilde))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


def hinf_lstm_step(x_t: Tensor, state: LstmState, p: LstmParams) -> LstmState:
    """Cell whose forget gate is replaced by a learned blend lambda_h = sigmoid(K_filter).

    c_t = (1 - lambda_h) * c_{t-1} + lambda_h * i_t * c~_t; the forget-gate
    weights are never touched.
    """
    _check_step_shapes(x_t, state, p)
    i = _gate(x_t, state.h, p, "i", ad.sigmoid)
    o = _gate(x_t, state.h, p, "o", ad.sigmoid)
    c_tilde = _gate(x_t, state.h, p, "c", ad.tanh)
    lam = p.robustness_coefficient()
    c = ad.add(ad.mul(ad.one_minus(lam), state.c), ad.mul(lam, ad.mul(i, c_tilde)))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


def _orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_lstm_arrays(rng, input_dim: int, hidden: int, lambda_mode: str, dtype=np.float32) -> dict:
    arrays = {}
    for g in GATES:
        arrays[f"lstm.W_{g}"] = _uniform(rng, (input_dim, hidden), input_dim, dtype)
    for g in GATES:
        arrays[f"lstm.U_{g}"] = _orthogonal(rng, hidden, dtype)
    for g in GATES:
        arrays[f"lstm.b_{g}"] = np.zeros(hidden, dtype=dtype)
    arrays["lstm.K_filter"] = np.zeros(1 if lambda_mode == "scalar" else hidden, dtype=dtype)
    return arrays


@dataclass
class ShapeReport:
    mel_shape: tuple
    padded_shape: tuple
    block_shapes: list
    feature_map: tuple
    sequence_length: int
    step_dim: int

    def lines(self) -> list:
        out = [f"input mel        {self.mel_shape}", f"padded input     {self.padded_shape}"]
        out += [f"after block {k}    {s}" for k, s in enumerate(self.block_shapes)]
        out += [f"sequence length  {self.sequence_length}", f"step dimension   {self.step_dim}"]
        return out


def shape_report(cfg: ModelConfig) -> ShapeReport:
    problems = cfg.problems()
    if problems:
        raise ModelConfigError("; ".join(problems))
    h, w = cfg.n_mels, cfg.padded_frames
    blocks = []
    for c in cfg.conv_blocks:
        h, w = h // 2, w // 2
        blocks.append((c, h, w))
    c = cfg.conv_blocks[-1]
    return ShapeReport((cfg.n_mels, cfg.n_frames), (cfg.n_mels, cfg.padded_frames),
                       blocks, (c, h, w), w, c * h)


class HInfCnnLstm:
    """Conv blocks -> recurrent cell over the frame axis -> dense -> sigmoid.

    ``params`` is an ordered name -> Tensor mapping; ``bn`` holds running
    statistics per batch-norm layer; names in ``frozen`` never reach the
    optimiser and their batch-norm layers run in eval mode.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.shapes = shape_report(cfg)
        self.dtype = np.dtype(dtype)
        self.params: dict = {}
        self.bn: dict = {}
        self.frozen: set = set()
        rng = np.random.default_rng(seed)

        c_in = 1
        for b, c_out in enumerate(cfg.conv_blocks):
            for k in range(2):
                src = c_in if k == 0 else c_out
                pre = f"block{b}"
                self._add(f"{pre}.conv{k}.weight", _uniform(rng, (c_out, src, 3, 3), src * 9, dtype))
                self._add(f"{pre}.conv{k}.bias", np.zeros(c_out, dtype=dtype))
                self._add(f"{pre}.bn{k}.gamma", np.ones(c_out, dtype=dtype))
                self._add(f"{pre}.bn{k}.beta", np.zeros(c_out, dtype=dtype))
                self.bn[f"{pre}.bn{k}"] = BatchNormState.fresh(c_out, dtype)
            c_in = c_out

        for name, arr in init_lstm_arrays(rng, self.shapes.step_dim, cfg.hidden_size,
                                          cfg.lambda_mode, dtype).items():
            self._add(name, arr)
        self._add("head.weight", _uniform(rng, (cfg.hidden_size, 1), cfg.hidden_size, dtype))
        self._add("head.bias", np.zeros(1, dtype=dtype))

    def _add(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    # -- parameter groups -------------------------------------------------
    @staticmethod
    def is_conv(name: str) -> bool:
        return name.startswith("block")

    def _inactive(self, name: str) -> bool:
        if self.cfg.cell_mode == "h_infinity":
            return name in ("lstm.W_f", "lstm.U_f", "lstm.b_f")
        return name == "lstm.K_filter"

    def trainable_names(self) -> list:
        return [n for n in self.params if n not in self.frozen and not self._inactive(n)]

    def trainable(self) -> dict:
        return {n: self.params[n] for n in self.trainable_names()}

    def freeze(self, names):
        self.frozen.update(names)
        for n in names:
            self.params[n].requires_grad = False

    @property
    def conv_frozen(self) -> bool:
        return any(self.is_conv(n) for n in self.frozen)

    def lstm_params(self) -> LstmParams:
        return LstmParams(**{n.split(".", 1)[1]: t for n, t in self.params.items()
                             if n.startswith("lstm.")})

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- forward ----------------------------------------------------------
    def pad_frames(self, x: np.ndarray) -> np.ndarray:
        target = self.cfg.padded_frames
        if x.shape[-1] > target:
            raise ValueError(f"input has {x.shape[-1]} frames, model expects at most {target}")
        if x.shape[-1] == target:
            return x
        pad = [(0, 0)] * (x.ndim - 1) + [(0, target - x.shape[-1])]
        return np.pad(x, pad)

    def conv_features(self, x: np.ndarray, train: bool = True) -> Tensor:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:3] != (1, self.cfg.n_mels):
            raise ValueError(f"expected input (B, 1, {self.cfg.n_mels}, T), got {x.shape}")
        h = Tensor(self.pad_frames(x))
        bn_mode = "train" if train and not self.conv_frozen else "eval"
        for b in range(len(self.cfg.conv_blocks)):
            h = conv_block_forward(h, self.params, self.bn, f"block{b}", bn_mode)
        return h

    def forward(self, x: np.ndarray, train: bool = True) -> Tensor:
        """Probabilities of the abnormal class, shape (B,)."""
        feats = self.conv_features(x, train)
        B, C, H, W = feats.shape
        seq = ad.reshape(ad.transpose(feats, (0, 3, 1, 2)), (B, W, C * H))
        p = self.lstm_params()
        step = hinf_lstm_step if self.cfg.cell_mode == "h_infinity" else standard_lstm_step
        state = LstmState.zeros(B, self.cfg.hidden_size, self.dtype)
        for t in range(W):
            state = step(ad.index(seq, (slice(None), t)), state, p)
        logit = ad.dense(state.h, self.params["head.weight"], self.params["head.bias"])
        return ad.sigmoid(ad.reshape(logit, (B,)))

    __call__ = forward

    # -- persistence ------------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = {n: t.data for n, t in self.params.items()}
        for n, st in self.bn.items():
            arrays[f"{n}.running_mean"] = st.running_mean
            arrays[f"{n}.running_var"] = st.running_var
        return arrays

    def state_meta(self) -> dict:
        return {
            "model_config": self.cfg.to_dict(),
            "trainable": self.trainable_names(),
            "frozen": sorted(self.frozen),
            "bn_updates": {n: st.updates for n, st in self.bn.items()},
        }

    def load_arrays(self, arrays: dict, meta: dict | None = None, allow=None):
        targets = self._array_targets()
        names = ad.assign_arrays(targets, arrays, allow=allow)
        updates = (meta or {}).get("bn_updates", {})
        for n, st in self.bn.items():
            if f"{n}.running_mean" in names:
                st.updates = int(updates.get(n, 1))
        return names

    def _array_targets(self) -> dict:
        targets = {n: t.data for n, t in self.params.items()}
        for n, st in self.bn.items():
            targets[f"{n}.running_mean"] = st.running_mean
            targets[f"{n}.running_var"] = st.running_var
        return targets


def conv_block_forward(x: Tensor, params: dict, bn: dict, prefix: str, bn_mode: str = "train") -> Tensor:
    """(conv -> BN -> ReLU) x 2 -> 2x2 max-pool; halves both spatial dims."""
    h = x
    for k in range(2):
        h = ad.conv2d_same(h, params[f"{prefix}.conv{k}.weight"], params[f"{prefix}.conv{k}.bias"])
        h = ad.batchnorm2d(h, params[f"{prefix}.bn{k}.gamma"], params[f"{prefix}.bn{k}.beta"],
                           bn[f"{prefix}.bn{k}"], bn_mode)
        h = ad.relu(h)
    return ad.maxpool_2x2(h)


def model_from_checkpoint(arrays: dict, meta: dict, seed: int = 0) -> HInfCnnLstm:
    cfg = ModelConfig(**meta["model_config"])
    model = HInfCnnLstm(cfg, seed=seed)
    model.load_arrays(arrays, meta)
    model.freeze([n for n in meta.get("frozen", [])])
    return model


def transfer_and_freeze(source_arrays: dict, source_meta: dict, target_cfg: ModelConfig,
                        seed: int = 0) -> HInfCnnLstm:
    """Start an H-infinity model from a trained standard-cell checkpoint.

    Conv/batch-norm weights and running statistics are copied and frozen,
    the head is copied and stays trainable, recurrent weights and K_filter
    are freshly initialised.
    """
    target = HInfCnnLstm(target_cfg, seed=seed)
    conv_names = [n for n in target._array_targets() if HInfCnnLstm.is_conv(n)]
    for n in conv_names:
        if n not in source_arrays:
            raise ad.CheckpointError(f"source checkpoint lacks conv parameter {n!r}")
        want = target._array_targets()[n].shape
        if tuple(source_arrays[n].shape) != tuple(want):
            raise ad.CheckpointError(
                f"conv parameter {n!r} shape mismatch: source {tuple(source_arrays[n].shape)} "
                f"vs target {tuple(want)}")
    extra = [n for n in source_arrays if HInfCnnLstm.is_conv(n) and n not in conv_names]
    if extra:
        raise ad.CheckpointError(f"source has conv parameter {extra[0]!r} absent from target")
    head = ["head.weight", "head.bias"]
    target.load_arrays(source_arrays, source_meta, allow=conv_names + head)
    target.freeze([n for n in target.params if HInfCnnLstm.is_conv(n)])
    return target

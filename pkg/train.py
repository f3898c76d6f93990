"""
Contrastive training of the dual towers.

sample (group-balanced) -> forward both towers -> cosine scores -> loss
-> backward -> Adam, with a linear-warmup + cosine-decay learning rate.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import (ADAM_BETA1, ADAM_BETA2, ADAM_EPS, AUDIO_ENCODER, AUDIO_ENCODER_DIM, BATCH_SIZE,
                    EMBED_DIM, ENCODERS_TRAINABLE, EPOCHS, FLOOR_LR, GRAD_CLIP, LOG_EVERY, LOGIT_FORM, LOSS,
                    LOSS_PARAM_LR_SCALE, LR_SCHEDULE, MLP_HIDDEN_MULT, PEAK_LR, SAMPLER_STRATEGY, SEED,
                    STEPS_PER_EPOCH, TEXT_BUCKETS, TEXT_ENCODER, TEXT_ENCODER_DIM, WARMUP_EPOCHS, config_hash)
from core import cosine_similarity_matrix
from data import SamplerState, parse_strategy, records_by_id, sample_batch
from data_manager import RunDataManager
from encoder_adapter import EncoderKind, EncoderSpec
from errors import ConfigError, InvalidInputError, NumericError
from loss import OBJECTIVES, LogitForm, LossParams, get_objective
from model import TowerParams, backward_towers, forward_towers, init_tower_params, save_checkpoint
from tensor_io import FeatureStore


# ===================================================================
# LEARNING-RATE SCHEDULE
# ===================================================================

@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = PEAK_LR
    floor_lr: float = FLOOR_LR
    warmup_steps: int = WARMUP_EPOCHS * STEPS_PER_EPOCH
    total_steps: int = EPOCHS * STEPS_PER_EPOCH

    def validate(self):
        if not 0 <= self.floor_lr <= self.peak_lr:
            raise ConfigError(f"need 0 <= floor_lr <= peak_lr, got {self.floor_lr}, {self.peak_lr}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        return self


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0 to peak, then cosine decay to floor; past the end stays at floor."""
    if step < 0:
        raise InvalidInputError(f"step must be non-negative, got {step}")
    if step >= cfg.total_steps:
        return cfg.floor_lr
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ===================================================================
# OPTIMIZER
# ===================================================================

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], opt: OptimizerState, lr: float):
    """
    One bias-corrected Adam update. Returns (new params, new state); inputs are
    not modified. Parameters keep their dtype, moments are float64.
    """
    for name, g in grads.items():
        if name not in params:
            raise InvalidInputError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidInputError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name}")
        if not np.all(np.isfinite(g)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(np.atleast_1d(g)))[0])
            raise NumericError(f"non-finite gradient in {name} at {bad}; step aborted", index=(name, bad))

    t = opt.step + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    new_params = dict(params)
    new_m = dict(opt.m)
    new_v = dict(opt.v)

    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = opt.m.get(name, np.zeros_like(g))
        v = opt.v.get(name, np.zeros_like(g))
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta = np.asarray(params[name], dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        new_params[name] = theta.astype(np.asarray(params[name]).dtype)
        new_m[name] = m
        new_v[name] = v

    return new_params, replace(opt, m=new_m, v=new_v, step=t)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float):
    """Scale all gradients together so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: np.asarray(g) * scale for k, g in grads.items()}, total


# ===================================================================
# TRAINING CONFIG
# ===================================================================

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    steps_per_epoch: int = STEPS_PER_EPOCH
    steps: Optional[int] = None
    seed: int = SEED
    loss: str = LOSS
    logit_form: str = LOGIT_FORM
    loss_param_lr_scale: float = LOSS_PARAM_LR_SCALE
    peak_lr: float = PEAK_LR
    floor_lr: float = FLOOR_LR
    warmup_epochs: int = WARMUP_EPOCHS
    lr_schedule: str = LR_SCHEDULE
    grad_clip: float = GRAD_CLIP
    strategy: str = SAMPLER_STRATEGY
    embed_dim: int = EMBED_DIM
    mlp_hidden_mult: int = MLP_HIDDEN_MULT
    audio_encoder: str = AUDIO_ENCODER
    audio_input_dim: Optional[int] = None
    audio_encoder_dim: int = AUDIO_ENCODER_DIM
    text_encoder: str = TEXT_ENCODER
    text_buckets: int = TEXT_BUCKETS
    text_encoder_dim: int = TEXT_ENCODER_DIM
    encoders_trainable: bool = ENCODERS_TRAINABLE
    log_every: int = LOG_EVERY

    @property
    def total_steps(self):
        return self.steps if self.steps is not None else self.epochs * self.steps_per_epoch

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.peak_lr, self.floor_lr,
                              self.warmup_epochs * self.steps_per_epoch,
                              self.epochs * self.steps_per_epoch)

    def validate(self):
        if self.batch_size < 4:
            raise ConfigError(f"batch_size must be >= 4 (one slot per group), got {self.batch_size}")
        if self.steps_per_epoch < 1 or self.epochs < 0:
            raise ConfigError("steps_per_epoch must be >= 1 and epochs >= 0")
        if self.steps is not None and self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.loss not in OBJECTIVES:
            raise ConfigError(f"Unknown loss: {self.loss}")
        try:
            LogitForm(self.logit_form)
        except ValueError:
            raise ConfigError(f"Unknown logit form: {self.logit_form}") from None
        if self.loss_param_lr_scale < 0 or self.grad_clip < 0:
            raise ConfigError("loss_param_lr_scale and grad_clip must be non-negative")
        if self.lr_schedule == 'cosine':
            self.schedule().validate()
        elif self.lr_schedule != 'constant':
            raise ConfigError(f"Unknown lr schedule: {self.lr_schedule}")
        parse_strategy(self.strategy)
        for kind in (self.audio_encoder, self.text_encoder):
            try:
                EncoderKind(kind)
            except ValueError:
                raise ConfigError(f"Unknown encoder kind: {kind}") from None
        if self.embed_dim < 1 or self.mlp_hidden_mult < 1:
            raise ConfigError("embed_dim and mlp_hidden_mult must be positive")
        return self

    def lr(self, step):
        if self.lr_schedule == 'constant':
            return self.peak_lr
        return lr_at(step, self.schedule())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {', '.join(unknown)}")
        return cls(**d)


def resolve_config(cfg: TrainConfig, records, store: FeatureStore) -> TrainConfig:
    """Fill data-dependent widths (audio feature width) from the first record."""
    if cfg.audio_input_dim is not None or not records:
        return cfg
    sample = np.asarray(store.read_row(records[0].feature_ref))
    return replace(cfg, audio_input_dim=int(sample.shape[-1]))


def build_specs(cfg: TrainConfig, records=None, store: FeatureStore = None):
    if cfg.audio_input_dim is None:
        raise ConfigError("audio_input_dim is unresolved")
    audio_kind = EncoderKind(cfg.audio_encoder)
    if audio_kind is EncoderKind.PASSTHROUGH:
        audio = EncoderSpec(audio_kind, cfg.audio_input_dim, cfg.audio_input_dim, trainable=False)
    else:
        audio = EncoderSpec(audio_kind, cfg.audio_input_dim, cfg.audio_encoder_dim, cfg.encoders_trainable)

    text_kind = EncoderKind(cfg.text_encoder)
    if text_kind is EncoderKind.PASSTHROUGH:
        if not records or records[0].text_ref is None:
            raise ConfigError("a PASSTHROUGH text encoder needs records with text_ref")
        width = int(np.asarray(store.read_row(records[0].text_ref)).shape[-1])
        text = EncoderSpec(text_kind, width, width, trainable=False)
    else:
        text = EncoderSpec(text_kind, cfg.text_buckets, cfg.text_encoder_dim, cfg.encoders_trainable)
    return audio, text


# ===================================================================
# TRAINER
# ===================================================================

@dataclass
class TrainResult:
    params: TowerParams
    metrics: pd.DataFrame
    checkpoints: List[str]
    config: TrainConfig


class Trainer:

    def __init__(self, records, cfg: TrainConfig, store: FeatureStore = None,
                 data_manager: RunDataManager = None, params: TowerParams = None):
        if not records:
            raise ConfigError("cannot train on an empty manifest")
        self.records = list(records)
        self.by_id = records_by_id(self.records)
        self.store = store or FeatureStore()
        self.cfg = resolve_config(cfg, self.records, self.store).validate()
        self.data_manager = data_manager
        self.objective = get_objective(self.cfg.loss)
        self.form = LogitForm(self.cfg.logit_form)
        self.config_hash = config_hash(self.cfg.to_dict())

        if params is None:
            audio_spec, text_spec = build_specs(self.cfg, self.records, self.store)
            params = init_tower_params(audio_spec, text_spec, self.cfg.embed_dim, self.cfg.seed,
                                       self.cfg.mlp_hidden_mult)
        self.params = params
        self.sampler = SamplerState.from_records(self.records, self.cfg.seed, self.cfg.strategy)
        self.sampler.check()
        self.tower_opt = OptimizerState()
        self.loss_opt = OptimizerState()
        self.metrics = []
        self.checkpoints = []

    def batch_records(self, ids):
        return [self.by_id[i] for i in ids]

    def compute_step(self, batch, params: TowerParams):
        """Forward, loss and gradients for one batch; nothing is updated."""
        audio, text, cache = forward_towers(batch, params, self.store)
        scores = cosine_similarity_matrix(audio, text)
        out = self.objective(scores, params.loss_params, self.form)
        if not math.isfinite(out.loss):
            raise NumericError(f"non-finite loss {out.loss}")
        grad_audio = out.grad_s @ text.rows
        grad_text = out.grad_s.T @ audio.rows
        grads = backward_towers(cache, grad_audio, grad_text, params)
        trainable = set(params.trainable_names())
        return out, {k: v for k, v in grads.items() if k in trainable}

    def apply_update(self, params: TowerParams, out, grads, lr):
        loss_params = params.loss_params
        loss_grads = {'u': np.float64(out.grad_u), 'beta': np.float64(out.grad_beta)}
        if self.cfg.grad_clip > 0:
            clipped, norm = clip_grad_norm({**grads, **{f'loss.{k}': v for k, v in loss_grads.items()}},
                                           self.cfg.grad_clip)
            grads = {k: v for k, v in clipped.items() if not k.startswith('loss.')}
            loss_grads = {k: clipped[f'loss.{k}'] for k in loss_grads}

        tensors = {k: v for k, v in params.named_tensors().items() if k in grads}
        tensors, self.tower_opt = adam_step(tensors, grads, self.tower_opt, lr)
        scalars = {'u': np.float64(loss_params.u), 'beta': np.float64(loss_params.beta)}
        scalars, self.loss_opt = adam_step(scalars, loss_grads, self.loss_opt, lr * self.cfg.loss_param_lr_scale)
        return params.with_tensors(tensors, LossParams(u=float(scalars['u']), beta=float(scalars['beta'])))

    def save(self, tag, step):
        if self.data_manager is None:
            return None
        path = save_checkpoint(self.params, self.data_manager.get_checkpoint_dir(tag), step=step,
                               config_hash=self.config_hash, logit_form=self.form)
        self.checkpoints.append(path)
        logging.info(f"Checkpoint saved: {path}")
        return path

    def run(self) -> TrainResult:
        cfg = self.cfg
        total = cfg.total_steps
        logging.info(f"Training {total} steps | B={cfg.batch_size} | loss={cfg.loss} | "
                     f"form={self.form.value} | strategy={cfg.strategy}")

        state = self.sampler
        for step in range(total):
            ids, state = sample_batch(state, cfg.batch_size)
            lr = cfg.lr(step)
            out, grads = self.compute_step(self.batch_records(ids), self.params)

            row = {'step': step, 'lr': lr, 'loss': out.loss,
                   'tau': self.params.loss_params.tau, 'beta': self.params.loss_params.beta}
            self.metrics.append(row)
            if self.data_manager is not None:
                self.data_manager.append_metrics(row)
            if cfg.log_every and step % cfg.log_every == 0:
                logging.info(f"step {step:6d} | lr {lr:.3e} | loss {out.loss:.5f} | "
                             f"tau {row['tau']:.4f} | beta {row['beta']:.4f}")

            self.params = self.apply_update(self.params, out, grads, lr)
            if (step + 1) % cfg.steps_per_epoch == 0:
                self.save(f"epoch_{(step + 1) // cfg.steps_per_epoch:03d}", step + 1)

        self.sampler = state
        self.save("final", total)
        metrics = pd.DataFrame(self.metrics, columns=['step', 'lr', 'loss', 'tau', 'beta'])
        logging.info(f"Training complete | steps={total} | final loss="
                     f"{metrics['loss'].iloc[-1] if len(metrics) else float('nan'):.5f}")
        return TrainResult(self.params, metrics, list(self.checkpoints), cfg)


def train(records, cfg: TrainConfig, store: FeatureStore = None, data_manager: RunDataManager = None) -> TrainResult:
    return Trainer(records, cfg, store, data_manager).run()

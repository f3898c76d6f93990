"""
Comparison experiments on one manifest:
- encoder swap: same recipe, different audio encoders, text-to-audio mAP10 per domain
- loss swap: sigmoid vs InfoNCE on the same seed and data
Each run trains from scratch and is scored on the evaluation manifest.
"""
import logging
from dataclasses import replace
from datetime import datetime
from typing import Dict

import numpy as np
import pandas as pd

from data import Domain
from encoder_adapter import EncoderSpec
from evaluation import evaluate_retrieval, per_domain_retrieval
from model import init_tower_params
from tensor_io import FeatureStore
from train import Trainer, TrainConfig, build_specs, resolve_config

DOMAIN_COLUMNS = [d.value for d in Domain]


class ExperimentRunner:

    def __init__(self, records, cfg: TrainConfig, store: FeatureStore = None, eval_records=None):
        self.records = list(records)
        self.store = store or FeatureStore()
        self.cfg = resolve_config(cfg, self.records, self.store).validate()
        self.eval_records = list(eval_records) if eval_records else self.records
        self.results = []

    # ========================
    # Encoder swap
    # ========================

    def train_with_audio_encoder(self, audio_spec: EncoderSpec):
        _, text_spec = build_specs(self.cfg, self.records, self.store)
        params = init_tower_params(audio_spec, text_spec, self.cfg.embed_dim, self.cfg.seed,
                                   self.cfg.mlp_hidden_mult)
        return Trainer(self.records, self.cfg, self.store, params=params).run()

    def run_encoder_comparison(self, encoders: Dict[str, EncoderSpec]) -> pd.DataFrame:
        rows = []
        for name, spec in encoders.items():
            logging.info(f"Encoder comparison: training with {name} ({spec.kind.value})")
            result = self.train_with_audio_encoder(spec)
            reports = per_domain_retrieval(result.params, self.eval_records, self.store)
            row = {'encoder': name}
            for domain in DOMAIN_COLUMNS:
                row[domain] = reports[domain][0].map10 if domain in reports else np.nan
            row['final_loss'] = float(result.metrics['loss'].iloc[-1]) if len(result.metrics) else np.nan
            rows.append(row)
        table = pd.DataFrame(rows, columns=['encoder'] + DOMAIN_COLUMNS + ['final_loss'])
        self.results.append(('Text-to-Audio mAP10 by audio encoder', table))
        return table

    # ========================
    # Loss swap
    # ========================

    def run_loss_comparison(self, losses=('sigmoid', 'infonce')) -> pd.DataFrame:
        rows = []
        for loss in losses:
            logging.info(f"Loss comparison: training with {loss}")
            cfg = replace(self.cfg, loss=loss)
            result = Trainer(self.records, cfg, self.store).run()
            t2a, a2t = evaluate_retrieval(result.params, self.eval_records, self.store)
            rows.append({
                'loss': loss,
                't2a_r1': t2a.r1, 't2a_r10': t2a.r10, 't2a_map10': t2a.map10,
                'a2t_r1': a2t.r1, 'a2t_r10': a2t.r10, 'a2t_map10': a2t.map10,
                'final_loss': float(result.metrics['loss'].iloc[-1]) if len(result.metrics) else np.nan,
            })
        table = pd.DataFrame(rows)
        self.results.append(('Retrieval by training loss', table))
        return table

    # ========================
    # Consolidated report
    # ========================

    def generate_consolidated_report(self):
        if not self.results:
            print("\nNo experiments to report!")
            return

        print("\n" + "=" * 80)
        print("CONSOLIDATED EXPERIMENT REPORT")
        print("=" * 80)
        print(f"Date: {datetime.now().strftime('%d-%m-%Y')}")
        print(f"Steps: {self.cfg.total_steps} | B: {self.cfg.batch_size} | Seed: {self.cfg.seed} | "
              f"Train pairs: {len(self.records)} | Eval pairs: {len(self.eval_records)}")

        for title, table in self.results:
            print("\n" + title)
            print("-" * 80)
            print(table.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
            print("-" * 80)
        print("=" * 80)

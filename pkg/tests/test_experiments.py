import numpy as np
from dataclasses import replace

from encoder_adapter import EncoderKind, EncoderSpec
from experiments import DOMAIN_COLUMNS, ExperimentRunner


def quick(cfg):
    return replace(cfg, steps=4)


def test_encoder_comparison_table(toy_records, store, small_config, capsys):
    runner = ExperimentRunner(toy_records, quick(small_config), store)
    encoders = {
        'narrow': EncoderSpec(EncoderKind.MEANPOOL_LINEAR, 16, 8),
        'raw': EncoderSpec(EncoderKind.PASSTHROUGH, 16, 16, trainable=False),
    }
    table = runner.run_encoder_comparison(encoders)
    assert table['encoder'].tolist() == ['narrow', 'raw']
    assert list(table.columns) == ['encoder'] + DOMAIN_COLUMNS + ['final_loss']
    assert table[DOMAIN_COLUMNS].apply(lambda col: col.between(0, 1)).all().all()

    runner.generate_consolidated_report()
    out = capsys.readouterr().out
    assert 'CONSOLIDATED EXPERIMENT REPORT' in out
    assert 'narrow' in out


def test_loss_comparison_uses_same_seed(toy_records, store, small_config):
    runner = ExperimentRunner(toy_records, quick(small_config), store)
    table = runner.run_loss_comparison()
    assert table['loss'].tolist() == ['sigmoid', 'infonce']
    assert np.isfinite(table['final_loss']).all()
    for column in ('t2a_r1', 't2a_r10', 'a2t_r1', 'a2t_r10'):
        assert table[column].between(0, 1).all()
    assert (table['t2a_r1'] <= table['t2a_r10']).all()


def test_separate_evaluation_manifest(toy_records, store, small_config):
    runner = ExperimentRunner(toy_records[:32], quick(small_config), store, eval_records=toy_records[32:])
    assert len(runner.eval_records) == 32
    table = runner.run_loss_comparison(losses=('sigmoid',))
    assert len(table) == 1


def test_empty_report(toy_records, store, small_config, capsys):
    ExperimentRunner(toy_records, quick(small_config), store).generate_consolidated_report()
    assert 'No experiments' in capsys.readouterr().out

import json
import os

import numpy as np
import pytest

import cli
from data import Domain, FeatureRef, Group, ManifestRecord, write_manifest
from encoder_adapter import EncoderKind, EncoderSpec
from errors import NumericError
from loss import LossParams
from model import ProjectionMLP, TowerParams, init_tower_params, save_checkpoint
from tensor_io import write_tensor

SMALL_TOWERS = ['--embed-dim', '16', '--audio-encoder-dim', '16', '--text-buckets', '256',
                '--text-encoder-dim', '16', '--log-every', '0']


def train_args(manifest, out, *extra):
    return ['train', '--manifest', manifest, '--steps', '10', '--batch-size', '8', '--seed', '1',
            '--out', str(out), *SMALL_TOWERS, *extra]


def read_json(path):
    with open(path, encoding='utf-8') as fh:
        return json.load(fh)


def read_bytes(path):
    with open(path, 'rb') as fh:
        return fh.read()


def labelled_manifest(directory, captions, domain=Domain.SOUND):
    """Clips whose captions are class labels, backed by random 16-d frame features."""
    feats = np.random.default_rng(0).normal(size=(len(captions), 2, 16)).astype(np.float32)
    write_tensor(os.path.join(directory, 'clips.glapt'), feats)
    group, language = (Group.SPEECH_EN, 'en') if domain is Domain.SPEECH else (Group.SOUND_MUSIC, 'en')
    records = [ManifestRecord(f"clip{i}", group, domain, language, caption, FeatureRef('clips.glapt', i))
               for i, caption in enumerate(captions)]
    path = os.path.join(directory, 'clips.jsonl')
    write_manifest(path, records)
    return path


def small_checkpoint(path):
    params = init_tower_params(EncoderSpec(EncoderKind.MEANPOOL_LINEAR, 16, 8),
                               EncoderSpec(EncoderKind.BYTE_TRIGRAM_HASH, 64, 8), embed_dim=8)
    return save_checkpoint(params, str(path))


class TestTrain:

    def test_writes_metrics_run_config_and_checkpoint(self, toy_manifest, tmp_path):
        out = tmp_path / 'run'
        assert cli.main(train_args(toy_manifest, out)) == 0
        with open(out / 'metrics.jsonl') as fh:
            assert len(fh.read().splitlines()) == 10
        config = read_json(out / 'run.json')
        assert config['subcommand'] == 'train'
        assert config['batch_size'] == 8 and config['steps'] == 10 and config['audio_input_dim'] == 16
        assert config['peak_lr'] == 1e-4
        assert os.path.exists(out / 'checkpoints' / 'final' / 'meta.json')
        assert os.path.getsize(out / 'glap.log') > 0

    def test_loss_recorded(self, toy_manifest, tmp_path):
        assert cli.main(train_args(toy_manifest, tmp_path / 'run', '--loss', 'infonce')) == 0
        assert read_json(tmp_path / 'run' / 'run.json')['loss'] == 'infonce'

    def test_missing_manifest(self, tmp_path):
        missing = str(tmp_path / 'absent.jsonl')
        assert cli.main(train_args(missing, tmp_path / 'run')) == 2
        with open(tmp_path / 'run' / 'glap.log') as fh:
            assert missing in fh.read()

    def test_missing_feature_file(self, tmp_path):
        records = [ManifestRecord(f"utt{i}", group, Domain.SOUND if group is Group.SOUND_MUSIC else Domain.SPEECH,
                                  'en', f"caption {i}", FeatureRef('absent.glapt', i))
                   for i, group in enumerate(Group)]
        manifest = str(tmp_path / 'absent.jsonl')
        write_manifest(manifest, records)
        args = train_args(manifest, tmp_path / 'run')
        args[args.index('--batch-size') + 1] = '4'
        assert cli.main(args) == 2
        with open(tmp_path / 'run' / 'glap.log') as fh:
            assert 'absent.glapt' in fh.read()

    def test_invalid_batch_size(self, toy_manifest, tmp_path):
        args = train_args(toy_manifest, tmp_path / 'run')
        args[args.index('--batch-size') + 1] = '2'
        assert cli.main(args) == 2

    def test_identical_runs_are_byte_identical(self, toy_manifest, tmp_path):
        assert cli.main(train_args(toy_manifest, tmp_path / 'a')) == 0
        assert cli.main(train_args(toy_manifest, tmp_path / 'b')) == 0
        assert read_bytes(tmp_path / 'a' / 'metrics.jsonl') == read_bytes(tmp_path / 'b' / 'metrics.jsonl')
        final_a = tmp_path / 'a' / 'checkpoints' / 'final'
        final_b = tmp_path / 'b' / 'checkpoints' / 'final'
        for name in sorted(os.listdir(final_a)):
            assert read_bytes(final_a / name) == read_bytes(final_b / name), name

    def test_saved_config_reproduces_run(self, toy_manifest, tmp_path):
        assert cli.main(train_args(toy_manifest, tmp_path / 'a')) == 0
        rerun = ['--config', str(tmp_path / 'a' / 'run.json'), 'train', '--out', str(tmp_path / 'b')]
        assert cli.main(rerun) == 0
        assert read_bytes(tmp_path / 'a' / 'metrics.jsonl') == read_bytes(tmp_path / 'b' / 'metrics.jsonl')
        first = read_json(tmp_path / 'a' / 'run.json')
        second = read_json(tmp_path / 'b' / 'run.json')
        assert {k: v for k, v in first.items() if k != 'out'} == {k: v for k, v in second.items() if k != 'out'}

    def test_saved_config_for_another_subcommand(self, toy_manifest, tmp_path):
        assert cli.main(train_args(toy_manifest, tmp_path / 'a')) == 0
        rerun = ['--config', str(tmp_path / 'a' / 'run.json'), 'gradcheck', '--out', str(tmp_path / 'b')]
        assert cli.main(rerun) == 2

    def test_plot_metrics(self, toy_manifest, tmp_path):
        assert cli.main(train_args(toy_manifest, tmp_path / 'run')) == 0
        run_config = read_bytes(tmp_path / 'run' / 'run.json')
        assert cli.main(['plot-metrics', '--run-dir', str(tmp_path / 'run')]) == 0
        assert os.path.exists(tmp_path / 'run' / 'reports' / 'metrics.png')
        assert read_bytes(tmp_path / 'run' / 'run.json') == run_config
        assert read_json(tmp_path / 'run' / 'reports' / 'plot_run.json')['subcommand'] == 'plot-metrics'


class TestEvalRetrieval:

    def test_identity_passthrough_is_perfect(self, tmp_path):
        rows = np.random.default_rng(0).normal(size=(12, 6)).astype(np.float32)
        write_tensor(str(tmp_path / 'audio.glapt'), rows)
        write_tensor(str(tmp_path / 'text.glapt'), rows)
        records = [ManifestRecord(f"utt{i}", Group.SPEECH_EN, Domain.SPEECH, 'en', f"caption {i}",
                                  FeatureRef('audio.glapt', i), FeatureRef('text.glapt', i)) for i in range(12)]
        manifest = str(tmp_path / 'eval.jsonl')
        write_manifest(manifest, records)
        spec = EncoderSpec(EncoderKind.PASSTHROUGH, 6, 6, trainable=False)
        params = TowerParams(spec, spec, {}, {}, ProjectionMLP.identity(6), ProjectionMLP.identity(6),
                             LossParams.init())
        checkpoint = save_checkpoint(params, str(tmp_path / 'ckpt'))

        out = tmp_path / 'eval'
        assert cli.main(['eval-retrieval', '--checkpoint', checkpoint, '--manifest', manifest,
                         '--out', str(out), '--per-domain']) == 0
        reports = read_json(out / 'reports' / 'retrieval.json')
        assert [r['direction'] for r in reports] == ['text_to_audio', 'audio_to_text']
        assert all(r['r1'] == 1.0 and r['map10'] == 1.0 for r in reports)
        assert set(read_json(out / 'reports' / 'retrieval_by_domain.json')) == {'speech'}

    def test_empty_manifest(self, tmp_path):
        manifest = tmp_path / 'empty.jsonl'
        manifest.write_text('', encoding='utf-8')
        assert cli.main(['eval-retrieval', '--checkpoint', str(tmp_path / 'none'), '--manifest', str(manifest),
                         '--out', str(tmp_path / 'eval')]) == 2

    @pytest.mark.parametrize('damage', ['tensor_file', 'meta_key'])
    def test_damaged_checkpoint(self, toy_manifest, tmp_path, damage):
        checkpoint = small_checkpoint(tmp_path / 'ckpt')
        if damage == 'tensor_file':
            os.remove(os.path.join(checkpoint, 'proj_a.W1.glapt'))
        else:
            meta_path = os.path.join(checkpoint, 'meta.json')
            meta = read_json(meta_path)
            del meta['loss_params']
            with open(meta_path, 'w') as fh:
                json.dump(meta, fh)
        assert cli.main(['eval-retrieval', '--checkpoint', checkpoint, '--manifest', toy_manifest,
                         '--out', str(tmp_path / 'eval')]) == 2

    def test_missing_checkpoint(self, toy_manifest, tmp_path):
        assert cli.main(['eval-retrieval', '--checkpoint', str(tmp_path / 'none'), '--manifest', toy_manifest,
                         '--out', str(tmp_path / 'eval')]) == 2


class TestEvalZeroShot:

    def run(self, tmp_path, domain, labels, captions, *extra):
        labels_file = tmp_path / 'labels.txt'
        labels_file.write_text('\n'.join(labels) + '\n', encoding='utf-8')
        manifest_domain = Domain.SPEECH if domain == 'speech' else Domain.SOUND
        manifest = labelled_manifest(str(tmp_path), captions, manifest_domain)
        checkpoint = small_checkpoint(tmp_path / 'ckpt')
        out = tmp_path / 'zs'
        code = cli.main(['eval-zeroshot', '--checkpoint', checkpoint, '--manifest', manifest,
                         '--labels', str(labels_file), '--domain', domain, '--out', str(out), *extra])
        return code, out

    def test_sound_prompts(self, tmp_path):
        code, out = self.run(tmp_path, 'sound', ['rain', 'dog barking'], ['rain', 'dog barking', 'rain'])
        assert code == 0
        assert read_json(out / 'reports' / 'prompts.json')['prompts'] == [
            'The sound of rain can be heard.', 'The sound of dog barking can be heard.']
        report = read_json(out / 'reports' / 'zeroshot.json')
        assert (report['task'], report['n_items'], report['n_labels']) == ('labels', 3, 2)
        assert 0.0 <= report['accuracy'] <= 1.0
        by_language = read_json(out / 'reports' / 'zeroshot_by_language.json')
        assert by_language[0]['language'] == 'en' and by_language[0]['n_items'] == 3

    def test_speech_prompts_are_bare_labels(self, tmp_path):
        code, out = self.run(tmp_path, 'speech', ['yes', 'no', 'stop'], ['stop', 'yes'])
        assert code == 0
        assert read_json(out / 'reports' / 'prompts.json')['prompts'] == ['yes', 'no', 'stop']

    def test_multi_label_reports_map(self, tmp_path):
        code, out = self.run(tmp_path, 'sound', ['rain', 'wind'], ['rain|wind', 'wind'], '--multi-label')
        assert code == 0
        assert 0.0 <= read_json(out / 'reports' / 'zeroshot.json')['map'] <= 1.0

    def test_unknown_domain(self, tmp_path):
        code, _ = self.run(tmp_path, 'vision', ['cat'], ['cat'])
        assert code == 2

    def test_caption_outside_label_set(self, tmp_path):
        code, _ = self.run(tmp_path, 'sound', ['rain'], ['thunder'])
        assert code == 2

    def test_label_file_not_utf8(self, tmp_path):
        labels_file = tmp_path / 'labels.txt'
        labels_file.write_bytes(b'rain\n\xff\xfe\n')
        manifest = labelled_manifest(str(tmp_path), ['rain'])
        code = cli.main(['eval-zeroshot', '--checkpoint', small_checkpoint(tmp_path / 'ckpt'), '--manifest', manifest,
                         '--labels', str(labels_file), '--domain', 'sound', '--out', str(tmp_path / 'zs')])
        assert code == 2
        with open(tmp_path / 'zs' / 'glap.log') as fh:
            assert 'line 2' in fh.read()


class TestDiagnostics:

    def test_gradcheck_passes(self, tmp_path, capsys):
        assert cli.main(['gradcheck', '--B', '8', '--seed', '0', '--out', str(tmp_path)]) == 0
        assert 'max relative error' in capsys.readouterr().out
        assert read_json(tmp_path / 'reports' / 'gradcheck.json')['passed'] is True

    @pytest.mark.parametrize('form', ['SIGLIP_CONSISTENT', 'PAPER_LITERAL'])
    def test_gradcheck_forms(self, tmp_path, form):
        assert cli.main(['gradcheck', '--B', '4', '--seed', '3', '--form', form, '--out', str(tmp_path)]) == 0

    def test_gradcheck_infonce(self, tmp_path):
        assert cli.main(['gradcheck', '--B', '4', '--seed', '3', '--loss', 'infonce', '--out', str(tmp_path)]) == 0

    def test_gradcheck_fails_above_tolerance(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, 'siglip_gradcheck', lambda B, seed, form: 1e-2)
        assert cli.main(['gradcheck', '--out', str(tmp_path)]) == 1

    def test_numeric_abort_exit_code(self, tmp_path, monkeypatch):
        def explode(args):
            raise NumericError("non-finite loss nan")
        monkeypatch.setitem(cli.COMMANDS, 'gradcheck', explode)
        assert cli.main(['gradcheck', '--out', str(tmp_path)]) == 3

    def imbalanced_manifest(self, tmp_path):
        layout = [(Group.SOUND_MUSIC, Domain.MUSIC, 'en', 1000), (Group.SPEECH_EN, Domain.SPEECH, 'en', 100),
                  (Group.SPEECH_ZH, Domain.SPEECH, 'zh', 10), (Group.SPEECH_OTHER, Domain.SPEECH, 'es', 5)]
        records = [ManifestRecord(f"{group.value}-{k}", group, domain, language, f"caption {k}",
                                  FeatureRef('feats.glapt', k))
                   for group, domain, language, size in layout for k in range(size)]
        path = str(tmp_path / 'imbalanced.jsonl')
        write_manifest(path, records)
        return path

    def test_sample_audit_uniform(self, tmp_path):
        manifest = self.imbalanced_manifest(tmp_path)
        assert cli.main(['sample-audit', '--manifest', manifest, '--draws', '4000', '--strategy', 'uniform',
                         '--out', str(tmp_path / 'audit')]) == 0
        report = read_json(tmp_path / 'audit' / 'reports' / 'sample_audit.json')
        assert report['draws'] == 4000 and report['failures'] == []
        assert all(0.22 <= g['frequency'] <= 0.28 for g in report['groups'])

    def test_sample_audit_stratified(self, tmp_path):
        manifest = self.imbalanced_manifest(tmp_path)
        assert cli.main(['sample-audit', '--manifest', manifest, '--strategy', 'stratified', '--batch-size', '8',
                         '--draws', '800', '--out', str(tmp_path / 'audit')]) == 0
        report = read_json(tmp_path / 'audit' / 'reports' / 'sample_audit.json')
        assert [g['count'] for g in report['groups']] == [200, 200, 200, 200]

    def test_sample_audit_manifest_not_utf8(self, tmp_path):
        manifest = tmp_path / 'bad.jsonl'
        manifest.write_bytes(b'{"id": "\xff\xfe"}\n')
        assert cli.main(['sample-audit', '--manifest', str(manifest), '--out', str(tmp_path / 'audit')]) == 2
        with open(tmp_path / 'audit' / 'glap.log') as fh:
            assert 'line 1' in fh.read()

    def test_sample_audit_empty_group(self, tmp_path):
        records = [ManifestRecord('a', Group.SPEECH_EN, Domain.SPEECH, 'en', 'x', FeatureRef('f.glapt', 0))]
        path = str(tmp_path / 'one.jsonl')
        write_manifest(path, records)
        assert cli.main(['sample-audit', '--manifest', path, '--out', str(tmp_path / 'audit')]) == 2


class TestComparisons:

    def test_compare_losses(self, toy_manifest, tmp_path):
        out = tmp_path / 'cmp'
        assert cli.main(['compare-losses', '--manifest', toy_manifest, '--steps', '2', '--batch-size', '8',
                         '--out', str(out), *SMALL_TOWERS]) == 0
        with open(out / 'reports' / 'loss_comparison.csv') as fh:
            assert fh.readline().startswith('loss,')

    def test_compare_encoders(self, toy_manifest, tmp_path):
        out = tmp_path / 'cmp'
        assert cli.main(['compare-encoders', '--manifest', toy_manifest, '--steps', '2', '--batch-size', '8',
                         '--variants', 'small=MEANPOOL_LINEAR:8', 'raw=PASSTHROUGH', '--out', str(out),
                         *SMALL_TOWERS]) == 0
        with open(out / 'reports' / 'encoder_comparison.csv') as fh:
            assert fh.readline().strip() == 'encoder,speech,sound,music,final_loss'

    def test_bad_variant(self, toy_manifest, tmp_path):
        assert cli.main(['compare-encoders', '--manifest', toy_manifest, '--variants', 'oops',
                         '--out', str(tmp_path / 'cmp'), *SMALL_TOWERS]) == 2

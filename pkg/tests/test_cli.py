"""Tests for cli module."""

import csv

import numpy as np
import pytest
import yaml

from fgreid.cli import ABLATIONS, _overrides, build_parser, main
from fgreid.config import RunConfig
from fgreid.evaluation import EmbeddingRecord, load_embeddings, save_embeddings
from fgreid.exceptions import ConfigurationError
from fgreid.head import HeadConfig
from fgreid.manifest import load_dataset

SMALL = [
    '--set', 'synth.num_identities=4', '--set', 'synth.tracklets_per_id=3',
    '--set', 'synth.frames=4', '--set', 'backbone.input_height=32', '--set', 'backbone.input_width=32',
    '--set', 'head.c_backbone=12', '--set', 'head.c_star=4', '--set', 'backbone.channels=8,16',
    '--set', 'batch.p=2', '--set', 'batch.k=2', '--set', 'batch.t=2',
    '--set', 'train.warmup_epochs=1', '--set', 'train.decay_epochs=',
]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    for name in ('FGREID_SEED', 'FGREID_EPOCHS', 'FGREID_OUTPUT_DIR', 'FGREID_PRESET'):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def perfect_embeddings(tmp_path):
    """One-hot identity embeddings: queries on camera 0, gallery on camera 1."""
    eye = np.eye(4)
    query = [EmbeddingRecord(f'q{i}', i, 0, eye[i]) for i in range(4)]
    gallery = [EmbeddingRecord(f'g{i}_{j}', i, 1, eye[i] * (j + 1)) for i in range(4) for j in range(2)]
    return (save_embeddings(query, tmp_path / 'query.fgrd'),
            save_embeddings(gallery, tmp_path / 'gallery.fgrd'))


class TestParser:
    def test_train_arguments(self):
        args = build_parser().parse_args(['train', '--seed', '3', '--epochs', '2', '--preset', 'desk'])
        assert (args.seed, args.epochs, args.preset) == (3, 2, 'desk')

    def test_repeated_set(self):
        args = build_parser().parse_args(['train', '--set', 'batch.p=4', '--set', 'batch.k=2'])
        assert _overrides(args.set) == {'batch.p': '4', 'batch.k': '2'}

    def test_ranks_list(self):
        args = build_parser().parse_args(['eval', '--query', 'q', '--gallery', 'g', '--ranks', '1,3'])
        assert args.ranks == [1, 3]

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(['publish'])
        assert info.value.code == 2

    def test_missing_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['extract', '--checkpoint', 'model.fgrd'])

    def test_unknown_preset(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['train', '--preset', 'huge'])

    def test_set_without_equals(self):
        with pytest.raises(ConfigurationError):
            _overrides(['batch.p'])


class TestErrors:
    def test_fgreid_error_exits_one(self, tmp_path, capsys):
        code = main(['eval', '--query', str(tmp_path / 'absent.fgrd'), '--gallery', str(tmp_path / 'g.fgrd')])
        assert code == 1
        assert capsys.readouterr().err.startswith('error: ')

    def test_unknown_config_key(self, capsys):
        assert main(['param-count', '--set', 'head.width=3']) == 1
        assert 'head.width' in capsys.readouterr().err


class TestParamCount:
    def test_compare_kqv(self, capsys):
        assert main(['param-count', '--compare-kqv']) == 0
        out = capsys.readouterr().out
        assert 'KQV delta: 262,400' in out
        assert 'head total' in out


class TestEval:
    def test_perfect_embeddings(self, tmp_path, perfect_embeddings, capsys):
        query, gallery = perfect_embeddings
        code = main(['eval', '--query', str(query), '--gallery', str(gallery),
                     '--ranks', '1,5', '--report', str(tmp_path / 'report')])
        assert code == 0
        out = capsys.readouterr().out
        assert 'mAP   1.0000' in out
        summary = yaml.safe_load((tmp_path / 'report' / 'summary.yaml').read_text(encoding='utf-8'))
        assert summary['mAP'] == 1.0
        assert summary['cmc'] == {1: 1.0, 5: 1.0}
        assert summary['rerank'] is False

    def test_rerank(self, tmp_path, perfect_embeddings, capsys):
        query, gallery = perfect_embeddings
        code = main(['eval', '--query', str(query), '--gallery', str(gallery), '--rerank',
                     '--set', 'eval.k1=3', '--set', 'eval.k2=2', '--report', str(tmp_path / 'report')])
        assert code == 0
        summary = yaml.safe_load((tmp_path / 'report' / 'summary.yaml').read_text(encoding='utf-8'))
        assert summary['rerank'] is True
        assert summary['k1'] == 3
        assert summary['cmc'][1] == 1.0

    def test_show_query(self, perfect_embeddings, capsys):
        query, gallery = perfect_embeddings
        assert main(['eval', '--query', str(query), '--gallery', str(gallery),
                     '--show-query', '2', '--top', '2']) == 0
        out = capsys.readouterr().out
        assert 'query q2 (identity 2)' in out
        assert 'g2_0' in out and 'g2_1' in out

    def test_show_query_out_of_range(self, perfect_embeddings):
        query, gallery = perfect_embeddings
        assert main(['eval', '--query', str(query), '--gallery', str(gallery), '--show-query', '9']) == 1

    def test_per_identity(self, tmp_path, perfect_embeddings, capsys):
        query, gallery = perfect_embeddings
        assert main(['eval', '--query', str(query), '--gallery', str(gallery),
                     '--set', 'eval.per_identity=true', '--report', str(tmp_path / 'report')]) == 0
        summary = yaml.safe_load((tmp_path / 'report' / 'summary.yaml').read_text(encoding='utf-8'))
        assert summary['num_gallery'] == 4


class TestWorkflow:
    def test_synth_train_extract_eval(self, tmp_path, capsys):
        data, run = tmp_path / 'data', tmp_path / 'run'
        assert main(['synth-gen', '--output', str(data)] + SMALL) == 0
        assert sorted(p.name for p in data.iterdir()) == [
            'all.jsonl', 'frames.fgrd', 'gallery.jsonl', 'query.jsonl', 'train.jsonl']

        assert main(['train', '--train', str(data / 'train.jsonl'), '--output', str(run),
                     '--epochs', '1'] + SMALL) == 0
        assert (run / 'model.fgrd').exists()
        assert (run / 'model.cfg').exists()
        assert 'final epoch 1' in capsys.readouterr().out

        checkpoint = str(run / 'model.fgrd')
        for split in ('query', 'gallery'):
            assert main(['extract', '--checkpoint', checkpoint, '--manifest', str(data / f'{split}.jsonl'),
                         '--output', str(tmp_path / f'{split}.fgrd')]) == 0
        assert len(load_embeddings(tmp_path / 'query.fgrd')) == 4
        assert len(load_embeddings(tmp_path / 'gallery.fgrd')) == 8

        assert main(['eval', '--query', str(tmp_path / 'query.fgrd'),
                     '--gallery', str(tmp_path / 'gallery.fgrd')]) == 0
        assert '4 queries, 8 gallery items, 0 excluded' in capsys.readouterr().out

        assert main(['param-count', '--checkpoint', checkpoint]) == 0

        assert main(['attn-export', '--checkpoint', checkpoint, '--manifest', str(data / 'query.jsonl'),
                     '--tracklet', 'id000_t02', '--frames', '2', '--output', str(tmp_path / 'maps')]) == 0
        assert len(list((tmp_path / 'maps').glob('id000_t02_*.ppm'))) == 2

    def test_frame_size_mismatch(self, tmp_path, capsys):
        data = tmp_path / 'data'
        assert main(['synth-gen', '--output', str(data)] + SMALL) == 0
        code = main(['train', '--train', str(data / 'train.jsonl'), '--output', str(tmp_path / 'run'),
                     '--epochs', '0'] + SMALL + ['--set', 'backbone.input_height=64'])
        assert code == 1
        assert '32x32 frames but' in capsys.readouterr().err

    def test_synth_gen_uses_input_size(self, tmp_path):
        data = tmp_path / 'data'
        assert main(['synth-gen', '--output', str(data)] + SMALL + ['--set', 'backbone.input_width=16']) == 0
        tracklets = load_dataset(data / 'all.jsonl')
        assert {tr.frames.shape[1:3] for tr in tracklets} == {(32, 16)}

    def test_synth_gen_rejects_empty_dataset(self, tmp_path, capsys):
        code = main(['synth-gen', '--output', str(tmp_path / 'data')] + SMALL + ['--set', 'synth.num_identities=0'])
        assert code == 1
        assert capsys.readouterr().err.startswith('error: ')

    def test_unknown_tracklet(self, tmp_path):
        data, run = tmp_path / 'data', tmp_path / 'run'
        main(['synth-gen', '--output', str(data)] + SMALL)
        main(['train', '--train', str(data / 'train.jsonl'), '--output', str(run), '--epochs', '0'] + SMALL)
        assert main(['attn-export', '--checkpoint', str(run / 'model.fgrd'),
                     '--manifest', str(data / 'query.jsonl'), '--tracklet', 'nobody',
                     '--output', str(tmp_path / 'maps')]) == 1


class TestAblate:
    def test_rows_build_valid_heads(self):
        for changes in ABLATIONS.values():
            cfg = RunConfig(changes)
            assert HeadConfig.from_run_config(cfg, num_classes=2).num_classes == 2

    def test_unknown_row(self, tmp_path):
        assert main(['ablate', '--rows', 'full,wo-everything', '--output', str(tmp_path)]) == 1

    def test_two_rows(self, tmp_path, capsys):
        out = tmp_path / 'ablation'
        assert main(['ablate', '--rows', 'full,only-gfm', '--epochs', '1', '--output', str(out)] + SMALL) == 0
        with open(out / 'ablation.csv', newline='', encoding='utf-8') as handle:
            rows = list(csv.DictReader(handle))
        assert [(row['row'], row['t']) for row in rows] == [('full', '2'), ('only-gfm', '2')]
        assert (out / 'full_t2' / 'summary.yaml').exists()

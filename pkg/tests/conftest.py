"""Shared fixtures: the mock corpus, scripted gateways, and one pipeline run."""

from __future__ import annotations

import importlib.util
import json
from pathlib import Path

import pytest

from conv2bench.corpus import Conversation, Message
from conv2bench.gateway import Gateway, MockProvider, ResponseCache, default_templates
from conv2bench.pipeline import PipelineConfig, run_pipeline

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture_script():
    """Import tests/fixtures/make_fixtures.py for its source-of-truth tables."""
    spec = importlib.util.spec_from_file_location(
        "make_fixtures", FIXTURES / "make_fixtures.py"
    )
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


@pytest.fixture(scope="session")
def fixture_script():
    return load_fixture_script()


def make_conv(
    conv_id: str = "t01",
    texts: tuple[str, ...] = ("write a quicksort in python", "Here you go."),
    language: str = "en",
    toxic: bool = False,
    source: str = "test",
) -> Conversation:
    messages = [
        Message(id=i, role="user" if i % 2 == 0 else "assistant", text=t)
        for i, t in enumerate(texts)
    ]
    return Conversation(
        conv_id=conv_id, messages=messages, language=language, toxic=toxic, source=source
    )


def make_gateway(rules, cache_dir=None) -> Gateway:
    cache = ResponseCache(cache_dir) if cache_dir else None
    return Gateway(default_templates(), MockProvider(rules), cache=cache)


def write_pipeline_config(tmp_dir: Path, **overrides) -> Path:
    cfg = {
        "corpus_path": str(FIXTURES / "corpus_mock12.jsonl"),
        "source_name": "fixture",
        "lexicon_path": str(FIXTURES / "lexicon_code.txt"),
        "provider": f"mock:{FIXTURES / 'mock_script.json'}",
        "pipeline_model": "mock-pipeline",
        "subject_models": ["mock-subject-a", "mock-subject-b"],
        "judge_model": "mock-judge",
        "sample_n": 12,
        "min_hits": 1,
        "seed": 7,
        "cluster_method": "kmeans",
        "n_clusters": 3,
        "bootstrap_B": 200,
        "out_root": str(tmp_dir / "runs"),
    }
    cfg.update(overrides)
    path = tmp_dir / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """One full mock-pipeline run shared by the CLI/acceptance tests."""
    tmp_dir = tmp_path_factory.mktemp("pipeline")
    config_path = write_pipeline_config(tmp_dir)
    config = PipelineConfig.load(config_path)
    manifest = run_pipeline(config)
    run_dir = config.resolve(config.out_root) / config.config_hash()[:12]
    return {
        "config_path": config_path,
        "config": config,
        "manifest": manifest,
        "run_dir": run_dir,
    }

"""Tests for environment configuration and experiment documents."""

import json
import logging
import os
from pathlib import Path
from unittest.mock import patch

import pytest
from pydantic import ValidationError

from src.config import (
    SimulationDocument,
    build_layer,
    build_trace,
    configure_logging,
    get_config,
    load_layer,
    load_simulation_document,
    save_layer,
)
from src.errors import ParameterError
from src.moe_core import MoELayer
from src.salc import Stage
from src.serve_sim import ControllerMode
from src.workload import Request, write_trace_csv

BURST_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "burst.json"


class TestGetConfig:
    """Test environment variable handling."""

    def test_defaults(self):
        """Test values when no variables are set."""
        with patch.dict(os.environ, {}, clear=True):
            config = get_config()
        assert config == {"log_level": "INFO", "debug": False, "output_dir": "./out", "max_workers": 1}

    def test_custom_values(self):
        """Test values are read from the environment."""
        env = {"LOG_LEVEL": "WARNING", "DEBUG": "True", "BROWNOUT_OUTPUT_DIR": "/tmp/runs", "BROWNOUT_MAX_WORKERS": "4"}
        with patch.dict(os.environ, env, clear=True):
            config = get_config()
        assert config["debug"] is True
        assert config["output_dir"] == "/tmp/runs"
        assert config["max_workers"] == 4

    @pytest.mark.parametrize("value", ["many", "0"])
    def test_invalid_workers(self, value):
        """Test a non-numeric or zero worker count raises ParameterError."""
        with patch.dict(os.environ, {"BROWNOUT_MAX_WORKERS": value}, clear=True):
            with pytest.raises(ParameterError, match="BROWNOUT_MAX_WORKERS"):
                get_config()


class TestConfigureLogging:
    """Test log level selection."""

    def teardown_method(self):
        logging.getLogger("brownout-moe").setLevel(logging.NOTSET)

    def test_level_applied(self):
        """Test LOG_LEVEL sets the package logger level."""
        configure_logging({"log_level": "warning", "debug": False})
        assert logging.getLogger("brownout-moe").level == logging.WARNING

    def test_debug_wins(self):
        """Test DEBUG overrides LOG_LEVEL."""
        configure_logging({"log_level": "ERROR", "debug": True})
        assert logging.getLogger("brownout-moe").level == logging.DEBUG

    def test_unknown_level(self):
        """Test an unknown level falls back to INFO."""
        configure_logging({"log_level": "LOUD", "debug": False})
        assert logging.getLogger("brownout-moe").level == logging.INFO


class TestSimulationDocument:
    """Test experiment document validation and conversion."""

    def test_bundled_burst_document(self):
        """Test the bundled configuration loads with the expected settings."""
        document = load_simulation_document(BURST_CONFIG)
        cfg = document.to_sim_config()

        assert cfg.controller.mode is ControllerMode.SALC
        assert cfg.salc_params(Stage.DECODE).slo == 0.15
        assert cfg.brownout.way == 8
        assert cfg.layers == 4
        assert document.workload.schedule().expected_count() == 425.0

    def test_defaults(self):
        """Test an empty document is a valid experiment with an empty workload."""
        document = SimulationDocument.model_validate({})
        assert document.to_sim_config().max_batch_size == 64
        assert build_trace(document) == []

    def test_unknown_section(self):
        """Test unknown keys are rejected."""
        with pytest.raises(ValidationError):
            SimulationDocument.model_validate({"engines": {}})

    def test_two_arrival_sources(self):
        """Test a workload with both segments and a burst is rejected."""
        with pytest.raises(ValidationError, match="at most one arrival source"):
            SimulationDocument.model_validate(
                {
                    "workload": {
                        "segments": [{"start": 0, "end": 10, "rps": 1}],
                        "burst": {"base_rps": 1, "burst_at": 5, "horizon": 10},
                    }
                }
            )

    def test_invalid_json(self, tmp_path):
        """Test a file that is not JSON raises JSONDecodeError."""
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(json.JSONDecodeError):
            load_simulation_document(path)

    def test_trace_path_is_relative_to_document(self, tmp_path):
        """Test a stored trace is resolved against the document directory."""
        write_trace_csv([Request(0, 0.5, 3, 4)], tmp_path / "trace.csv")
        document = SimulationDocument.model_validate({"workload": {"trace_path": "trace.csv"}})
        assert build_trace(document, tmp_path) == [Request(0, 0.5, 3, 4)]

    def test_generated_trace_is_seeded(self):
        """Test the generated workload follows the document seed."""
        data = {"workload": {"seed": 3, "segments": [{"start": 0, "end": 20, "rps": 2}]}}
        document = SimulationDocument.model_validate(data)
        assert build_trace(document) == build_trace(document)
        assert all(r.input_len + r.output_len <= 2048 for r in build_trace(document))


class TestLayerFiles:
    """Test layer persistence and selection."""

    def test_save_and_load(self, tmp_path):
        """Test a saved layer loads with identical weights."""
        layer = MoELayer.random(d=4, h=4, m=4, k=2, top_k=2, seed=1)
        save_layer(layer, tmp_path / "nested" / "layer.json")
        loaded = load_layer(tmp_path / "nested" / "layer.json")
        assert loaded.group_way == 2
        assert (loaded.routed_experts[1].up_weights == layer.routed_experts[1].up_weights).all()

    def test_loaded_layer_is_regrouped(self, tmp_path):
        """Test a stored layer is regrouped to the document's brownout way."""
        save_layer(MoELayer.random(d=4, h=4, m=4, k=2, top_k=2, seed=1), tmp_path / "layer.json")
        document = SimulationDocument.model_validate(
            {
                "model": {"d": 4, "h": 4, "m": 4, "top_k": 2, "layer_path": "layer.json"},
                "brownout": {"way": 4},
            }
        )
        assert build_layer(document, tmp_path).group_way == 4

    def test_generated_layer(self):
        """Test without a layer path the layer is generated from the model section."""
        document = SimulationDocument.model_validate({"model": {"d": 4, "h": 4, "m": 6, "top_k": 2}})
        layer = build_layer(document)
        assert (layer.m, layer.d, layer.group_way) == (6, 4, 1)

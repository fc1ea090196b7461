import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantnas.config import RunConfig, dump_config, load_config, parse_config_text, toy_preset
from quantnas.tensor import ConfigurationError

GOOD = """\
[space]
channels = 6
bits = 2, 4, 8
head = simple_3x3, simple_5x5

[search]
eta = 1e-4
bitops_hw = 16x16
max_iters_per_epoch = none

[sweep]
etas = 0, 1e-4
"""


class TestParse:
    def test_values(self):
        cfg = parse_config_text(GOOD)
        assert cfg.space.channels == 6
        assert cfg.space.bits == (2, 4, 8)
        assert cfg.space.catalogs["head"] == ["simple_3x3", "simple_5x5"]
        assert cfg.space.catalogs["tail"] == RunConfig().space.catalogs["tail"]
        assert cfg.search.eta == 1e-4 and cfg.search.bitops_hw == (16, 16)
        assert cfg.search.max_iters_per_epoch is None
        assert cfg.etas == [0.0, 1e-4]

    def test_defaults(self):
        assert parse_config_text("") == RunConfig()

    def test_base_overlay(self):
        cfg = parse_config_text("[train]\nepochs = 3\n", base=toy_preset())
        assert cfg.train.epochs == 3
        assert cfg.search == toy_preset().search

    @pytest.mark.parametrize(
        "text,line,needle",
        [
            ("[space]\nchannels = 4\nbitz = 4\n", 3, "bitz"),
            ("[spaces]\nchannels = 4\n", 1, "spaces"),
            ("[space]\n\nchannels = four\n", 3, "channels"),
            ("[search]\nstrategy = mixed\n", 2, "strategy"),
            ("[edge]\nact_noise = middle\n", 2, "act_noise"),
            ("channels = 4\n", 1, "section"),
            ("[space]\nchannels = 4\nchannels = 5\n", 3, "channels"),
            ("[data]\nimage_hw = 32\n", 2, "image_hw"),
        ],
    )
    def test_errors_name_line_and_key(self, text, line, needle):
        with pytest.raises(ConfigurationError) as info:
            parse_config_text(text, source="run.cfg")
        msg = str(info.value)
        assert msg.startswith(f"run.cfg:{line}")
        assert needle in msg

    def test_semantic_error_names_section(self):
        with pytest.raises(ConfigurationError, match=r"run.cfg:1: \[space\]"):
            parse_config_text("[space]\nbits = 1, 4\n", source="run.cfg")

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text(GOOD)
        assert load_config(p) == parse_config_text(GOOD)


class TestDump:
    @pytest.mark.parametrize("cfg", [RunConfig(), toy_preset(), parse_config_text(GOOD)])
    def test_round_trip(self, cfg):
        text = dump_config(cfg)
        again = parse_config_text(text)
        assert again == cfg
        assert dump_config(again) == text

    @settings(max_examples=40, deadline=None)
    @given(
        channels=st.integers(1, 64),
        bits=st.lists(st.integers(2, 8), min_size=1, max_size=4).map(tuple),
        eta=st.floats(0, 1, allow_nan=False),
        w_lr=st.floats(1e-8, 1.0),
        etas=st.lists(st.floats(0, 1e-2, allow_nan=False), min_size=1, max_size=4),
        crop=st.one_of(st.none(), st.integers(0, 8)),
    )
    def test_round_trip_property(self, channels, bits, eta, w_lr, etas, crop):
        base = RunConfig()
        text = (
            f"[space]\nchannels = {channels}\nbits = {', '.join(map(str, bits))}\n"
            f"[search]\neta = {eta!r}\nw_lr = {w_lr!r}\n"
            f"[train]\neval_crop = {'none' if crop is None else crop}\n"
        )
        cfg = parse_config_text(text, base=base)
        cfg.etas = list(etas)
        assert parse_config_text(dump_config(cfg)) == cfg

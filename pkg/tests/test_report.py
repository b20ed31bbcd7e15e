import csv

from triplane_codec.codec.container import compress_scene
from triplane_codec.report import (
    LOSS_COLUMNS,
    SECTION_COLUMNS,
    history_rows,
    section_rows,
    write_stats_report,
    write_training_report,
)


def test_training_report(tiny_trained, tmp_path):
    cloud, cfg, state = tiny_trained
    paths = write_training_report(state.history, tmp_path, cloud.n)
    assert all((tmp_path / p).exists() for p in paths)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert tuple(rows[0]) == LOSS_COLUMNS
    assert len(rows) - 1 == cfg.total_steps == len(history_rows(state.history))


def test_stats_report(tiny_trained, tmp_path):
    cloud, _, state = tiny_trained
    _, stats = compress_scene(cloud, state)
    write_stats_report(stats, tmp_path)
    rows = list(csv.reader(open(tmp_path / "sections.csv")))
    assert tuple(rows[0]) == SECTION_COLUMNS
    assert len(rows) - 1 == len(stats.sections)
    assert sum(int(r[1]) for r in rows[1:]) <= stats.total_bytes
    assert (tmp_path / "sections.png").stat().st_size > 0
    assert len(section_rows(stats)) == 7

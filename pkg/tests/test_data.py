import numpy as np
import pytest

from ve_wane.data import TrialData, read_csv, write_csv
from ve_wane.model import TrialTimeline

from _toys import make_data


def test_roundtrip_lossless(tmp_path):
    data = make_data([
        dict(entry=1.25, arm=0, u=30.0, r=30.0, gamma=0, psi=0, x=[1.0, 44.375]),
        dict(entry=2.0, arm=1, u=1e9, infected=0, r=22.5, gamma=2, psi=1, x=[0.0, 51.2]),
        dict(entry=0.0625, arm=1, u=np.inf, infected=0, r=20.25, gamma=1, psi=0, x=[1.0, 39.9]),
    ], k=2)
    path = tmp_path / "d.csv"
    write_csv(data, path)
    back = read_csv(path)
    for field in ("entry", "u", "r_time", "x"):
        assert np.array_equal(getattr(back, field), getattr(data, field))
    assert np.array_equal(back.arm, data.arm)
    assert np.array_equal(back.gamma, data.gamma)
    assert np.array_equal(back.psi, data.psi)


def test_missing_psi_maps_to_zero_with_flag(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text(
        "entry,arm,u,delta,r,gamma,psi,x1\n"
        "1.0,1,30.0,1,22.0,2,,0.5\n"
        "2.0,0,28.0,1,28.0,0,1,1.5\n"
    )
    data = read_csv(path)
    assert data.psi[0] == 0 and not data.psi_valid[0]
    assert data.psi[1] == 1 and data.psi_valid[1]


def test_empty_csv_rejected(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_csv(path)
    path.write_text("entry,arm,u,delta,r,gamma,psi,x1\n")
    with pytest.raises(ValueError, match="no data rows"):
        read_csv(path)


def test_bad_header_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        read_csv(path)


def test_validate_reports_rows():
    data = make_data([
        dict(entry=5.0, arm=0, u=30.0, r=30.0, gamma=0, psi=0),
        dict(entry=13.0, arm=0, u=30.0, r=30.0, gamma=0, psi=0),  # entry too late
    ])
    problems = data.validate(TrialTimeline())
    assert len(problems) == 1 and problems[0].startswith("row 1")


def test_record_accessor():
    data = make_data([dict(entry=1.0, arm=1, u=25.0, r=20.0, gamma=1, psi=1, x=[0.25])])
    rec = data.record(0)
    assert rec.arm == 1 and rec.gamma == 1 and rec.x.shape == (1,)
    assert len(list(data.records())) == 1

import csv
import hashlib
import json

import numpy as np
import pytest

from r3s2 import cli
from r3s2 import kernel_synthesis as ks
from r3s2.fields import R3S2Field, load_field, save_field
from r3s2.sh_core import icosahedral_mesh, icosahedral_sampling

SMALL = ["--lmax", "4", "--grid-n", "4", "--grid-eta", "2"]


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_kernel(tmp_path_factory):
    out = tmp_path_factory.mktemp("kernel") / "k.r3s2"
    assert run("kernel", "--process", "diffusion", "--t", 1, *SMALL, "--out", out) == 0
    return out


# ---------------------------------------------------------------- kernel

def test_kernel_writes_field_and_manifest(small_kernel):
    f = load_field(small_kernel)
    assert f.dims == (9, 9, 9) and f.storage == "sh" and f.lmax == 4
    man = json.load(open(str(small_kernel) + ".manifest.json"))
    for key in ("subcommand", "argv", "parameters", "version", "seed", "timings"):
        assert key in man
    assert man["subcommand"] == "kernel"
    assert man["parameters"]["D44"] == 0.1
    assert man["summary"]["mass"] == pytest.approx(1.0, abs=0.05)


def test_manifest_replay_is_bit_exact(small_kernel, tmp_path):
    before = digest(small_kernel)
    assert run("replay", str(small_kernel) + ".manifest.json") == 0
    assert digest(small_kernel) == before


def test_kernel_check_and_report(tmp_path):
    out = tmp_path / "k.r3s2"
    rc = run("kernel", "--process", "diffusion", "--t", 1, *SMALL, "--check",
             "--report", tmp_path / "rep", "--out", out)
    assert rc == 0
    man = json.load(open(str(out) + ".manifest.json"))
    assert "hermitian" in " ".join(man["checks"]) or man["checks"]
    rows = list(csv.reader(open(tmp_path / "rep" / "k_summary.csv")))
    assert rows[0] == ["quantity", "value"]
    assert (tmp_path / "rep" / "k_projections.png").stat().st_size > 0


def test_log_approx_backend_sample_storage(tmp_path):
    out = tmp_path / "a.r3s2"
    assert run("kernel", "--process", "diffusion", "--t", 1, "--backend", "log-approx",
               "--grid-n", 2, "--grid-eta", 2, "--out", out) == 0
    f = load_field(out)
    assert f.storage == "samples" and f.dims == (5, 5, 5)


@pytest.mark.parametrize("argv", [
    ["kernel", "--process", "diffusion", "--out", "x.r3s2"],
    ["kernel", "--process", "diffusion", "--t", "1", "--alpha", "1", "--out", "x.r3s2"],
    ["kernel", "--process", "diffusion", "--t", "1", "--d44", "-1", "--out", "x.r3s2"],
    ["kernel", "--process", "sideways", "--t", "1", "--out", "x.r3s2"],
    ["kernel", "--process", "diffusion", "--t", "1", "--grid-n", "0", "--out", "x.r3s2"],
    ["kernel", "--process", "completion", "--t", "1", "--backend", "log-approx", "--out", "x.r3s2"],
    ["montecarlo", "--process", "diffusion", "--t", "1", "--walks", "0", "--out", "x.r3s2"],
    ["montecarlo", "--process", "diffusion", "--walks", "10", "--out", "x.r3s2"],
    ["header", "--input", "does-not-exist.r3s2"],
    ["eigencurves", "--m", "-1", "--rho-max", "2", "--out", "x.csv"],
    ["no-such-command"],
])
def test_invalid_flags_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == cli.EXIT_USAGE


def test_numerical_failure_exit_3(tmp_path, monkeypatch, capsys):
    def broken(*a, **k):
        raise np.linalg.LinAlgError("singular matrix at a branch point")

    monkeypatch.setattr(ks, "spatial_kernel", broken)
    rc = run("kernel", "--process", "completion", "--alpha", 1, *SMALL, "--out", tmp_path / "x.r3s2")
    assert rc == cli.EXIT_NUMERICAL
    assert "branch point" in capsys.readouterr().err


def test_help_documents_defaults(capsys):
    assert cli.main(["kernel", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--d33", "--d44", "--lmax", "--grid-n", "--grid-eta", "--gamma-k"):
        assert flag in text
    assert "default" in text


def test_header_prints_dims(small_kernel, capsys):
    assert run("header", "--input", small_kernel) == 0
    text = capsys.readouterr().out
    assert "9 x 9 x 9" in text and "lmax" in text


# ---------------------------------------------------------------- montecarlo

def test_montecarlo_same_seed_same_hash(tmp_path):
    args = ["montecarlo", "--process", "diffusion", "--t", 1, "--walks", 2000, "--steps", 20,
            "--bins", 9, "--sphere-refinement", 1]
    a, b, c = tmp_path / "a.r3s2", tmp_path / "b.r3s2", tmp_path / "c.r3s2"
    assert run(*args, "--seed", 7, "--out", a) == 0
    assert run(*args, "--seed", 7, "--out", b) == 0
    assert run(*args, "--seed", 8, "--out", c) == 0
    assert digest(a) == digest(b)
    assert digest(str(a) + ".endpoints.f64") == digest(str(b) + ".endpoints.f64")
    assert digest(a) != digest(c)
    man = json.load(open(str(a) + ".manifest.json"))
    assert man["seed"] == 7
    h = load_field(a)
    assert h.dims == (9, 9, 9) and len(h.sampling) == 42


def test_montecarlo_replay_and_report(tmp_path):
    out = tmp_path / "h.r3s2"
    assert run("montecarlo", "--process", "completion", "--alpha", 1, "--walks", 500,
               "--steps", 10, "--bins", 7, "--sphere-refinement", 1,
               "--report", tmp_path, "--out", out) == 0
    before = digest(out)
    assert run("replay", str(out) + ".manifest.json") == 0
    assert digest(out) == before
    rows = list(csv.reader(open(tmp_path / "h_z_marginal.csv")))
    assert rows[0] == ["z", "probability"] and len(rows) == 8


# ---------------------------------------------------------------- enhance

def test_enhance_impulse_and_mismatch(small_kernel, tmp_path):
    s = icosahedral_sampling(2)
    k = load_field(small_kernel)
    j = int(np.argmax(s.directions[:, 2]))
    v = np.zeros((9, 9, 9, len(s)))
    v[4, 4, 4, j] = 1.0 / (s.weights[j] * k.voxel_size ** 3)
    inp = tmp_path / "in.r3s2"
    save_field(R3S2Field(v, k.voxel_size, sampling=s), inp)
    out = tmp_path / "out.r3s2"
    assert run("enhance", "--kernel", small_kernel, "--input", inp, "--out", out) == 0
    got = load_field(out).values
    ref = k.to_samples(s).values
    assert np.abs(got - ref).max() < 1e-8 * np.abs(ref).max()

    # a sample-stored kernel on a different orientation table is rejected
    other = tmp_path / "other.r3s2"
    save_field(k.to_samples(icosahedral_sampling(1)), other)
    assert run("enhance", "--kernel", other, "--input", inp, "--out", tmp_path / "bad.r3s2") == 2


# ---------------------------------------------------------------- glyphs

def glyph_input(tmp_path, values, sampling):
    path = tmp_path / "g.r3s2"
    save_field(R3S2Field(values, 0.5, sampling=sampling), path)
    return path


def test_glyph_vertex_count_and_constant_spheres(tmp_path):
    s = icosahedral_sampling(2)
    path = glyph_input(tmp_path, np.ones((3, 3, 3, len(s))), s)
    obj = tmp_path / "g.obj"
    assert run("glyphs", "--input", path, "--out", obj, "--sphere-refinement", 2) == 0
    groups = cli.read_obj_groups(obj)
    verts, faces = icosahedral_mesh(2)
    assert len(groups) == 27
    assert sum(len(g) for g in groups.values()) == 27 * len(verts)
    text = open(obj).read()
    assert text.count("\nf ") == 27 * len(faces)
    radii = []
    for name, v in groups.items():
        i, j, k = (int(x) for x in name.split("_")[1:])
        centre = (np.array([i, j, k]) - 1) * 0.5
        r = np.linalg.norm(v - centre, axis=1)
        assert np.ptp(r) < 1e-6
        radii.append(r.mean())
    # equal radii, half the spacing so neighbouring glyphs touch but do not cross
    assert np.ptp(radii) < 1e-6
    assert radii[0] == pytest.approx(0.25, rel=1e-6)


def test_glyph_single_peak_is_elongated_lobe(tmp_path):
    s = icosahedral_sampling(2)
    verts, _ = icosahedral_mesh(2)
    target = np.array([0.3, -0.2, 0.9])
    target /= np.linalg.norm(target)
    U = np.exp(8.0 * (s.directions @ target - 1.0))
    v = np.zeros((1, 1, 1, len(s)))
    v[0, 0, 0] = U
    path = glyph_input(tmp_path, v, s)
    obj = tmp_path / "g.obj"
    assert run("glyphs", "--input", path, "--out", obj) == 0
    (g,) = cli.read_obj_groups(obj).values()
    r = np.linalg.norm(g, axis=1)
    tip = g[np.argmax(r)] / r.max()
    assert tip @ target > 0.97
    # far longer along the peak than across it
    across = np.abs(g @ target) < 0.05 * r.max()
    assert r.max() > 5 * r[across].max()


def test_glyph_empty_field_exit_2(tmp_path):
    s = icosahedral_sampling(1)
    path = glyph_input(tmp_path, np.zeros((2, 2, 2, len(s))), s)
    assert run("glyphs", "--input", path, "--out", tmp_path / "g.obj") == 2


def test_glyph_spacing_and_crop(small_kernel, tmp_path):
    obj = tmp_path / "k.obj"
    assert run("glyphs", "--input", small_kernel, "--out", obj, "--spacing", 2, "--crop", 2,
               "--sphere-refinement", 1) == 0
    names = set(cli.read_obj_groups(obj))
    # the centre voxel (4, 4, 4) is always on the selected lattice
    assert "voxel_4_4_4" in names and len(names) == 27


# ---------------------------------------------------------------- eigencurves

def test_eigencurves_csv_schema_and_reality(tmp_path):
    out = tmp_path / "m0.csv"
    assert run("eigencurves", "--m", 0, "--rho-max", 3, "--n-rho", 31, "--lmax", 12,
               "--out", out) == 0
    rows = list(csv.DictReader(open(out)))
    assert list(rows[0].keys()) == ["m", "l_index", "rho", "re", "im"]
    assert len(rows) == 31 * 13
    below = [r for r in rows if float(r["rho"]) < 1.0]
    assert below and max(abs(float(r["im"])) for r in below) < 1e-9
    assert any(abs(float(r["im"])) > 1e-3 for r in rows)
    bp = list(csv.reader(open(tmp_path / "m0_branch_points.csv")))
    assert bp[0] == ["m", "index", "rho", "resolution"]
    assert 1.0 < float(bp[1][2]) < 3.0
    swe = list(csv.DictReader(open(tmp_path / "m0_swe.csv")))
    assert all(float(r["im"]) == 0.0 for r in swe)
    assert (tmp_path / "m0.png").stat().st_size > 0


def test_eigencurves_swe_ordering_preserved(tmp_path):
    out = tmp_path / "m2.csv"
    assert run("eigencurves", "--m", 2, "--rho-max", 2, "--n-rho", 21, "--lmax", 12,
               "--out", out) == 0
    rows = list(csv.DictReader(open(tmp_path / "m2_swe.csv")))
    by_rho = {}
    for r in rows:
        by_rho.setdefault(float(r["rho"]), []).append((int(r["l_index"]), float(r["re"])))
    for vals in by_rho.values():
        re = [v for _, v in sorted(vals)]
        assert np.all(np.diff(re) > 0)
    # below the first branch point no branch points are reported
    assert len(list(csv.reader(open(tmp_path / "m2_branch_points.csv")))) == 1


def test_every_option_has_help():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            assert action.help, f"{name} {action.option_strings or action.dest} lacks help"

import io
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microcpd.exceptions import SelectionError, StructureParseError
from microcpd.structure import (
    AMINO_ACIDS,
    CLASS_INDEX,
    ProteinModel,
    extract_sites,
    parse_pdb,
    parse_pqr,
    read_structure,
    sample_sites,
    select_chains,
    write_pqr,
)


def atom_line(serial, name, resname, chain, seq, xyz, occ=1.0, alt=" ", element="", record="ATOM", icode=" "):
    field = f" {name:<3}" if len(name) < 4 else name
    x, y, z = xyz
    return (f"{record:<6}{serial:5d} {field}{alt}{resname:>3} {chain}{seq:4d}{icode}   "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{occ:6.2f}{0.0:6.2f}          {element:>2}")


def residue_lines(start_serial, resname, chain, seq, origin, with_cb=True):
    ox, oy, oz = origin
    atoms = [("N", (1.458, 0.0, 0.0)), ("CA", (0.0, 0.0, 0.0)), ("C", (-0.551, 1.420, 0.0)),
             ("O", (-0.2, 2.4, 0.7))]
    if with_cb:
        atoms.append(("CB", (-0.53, -0.77, 1.21)))
    return [atom_line(start_serial + k, name, resname, chain, seq, (x + ox, y + oy, z + oz))
            for k, (name, (x, y, z)) in enumerate(atoms)]


def chain_text(resnames, chain="A", spacing=3.8):
    lines, serial = [], 1
    for k, res in enumerate(resnames):
        lines += residue_lines(serial, res, chain, k + 1, (k * spacing, 0.0, 0.0), with_cb=res != "GLY")
        serial += 5
    return "\n".join(lines) + "\nEND\n"


def line_scan_atom_count(path):
    """Independent count: ATOM rows of the first model, one per (chain, seq, icode, name)."""
    seen = set()
    with open(path) as fh:
        for line in fh:
            if line.startswith("ENDMDL"):
                break
            if re.match(r"ATOM  ", line):
                seen.add((line[21], line[22:26], line[26], line[12:16]))
    return len(seen)


# -- PDB ------------------------------------------------------------------


def test_single_ca_line():
    model = parse_pdb(atom_line(1, "CA", "ALA", "A", 1, (1.0, 2.0, 3.0)))
    assert len(model) == 1
    atom = model.atoms[0]
    assert atom.element == "C"
    assert atom.name == "CA" and atom.residue_name == "ALA" and atom.chain_id == "A"
    np.testing.assert_array_equal(atom.position, [1.0, 2.0, 3.0])


def test_column_layout_is_exact():
    line = atom_line(42, "OG1", "THR", "B", 117, (-12.345, 0.5, 99.999), occ=0.75, element="O", icode="A")
    atom = parse_pdb(line).atoms[0]
    assert (atom.serial, atom.name, atom.residue_name, atom.chain_id) == (42, "OG1", "THR", "B")
    assert (atom.residue_seq, atom.insertion_code, atom.occupancy, atom.element) == (117, "A", 0.75, "O")
    np.testing.assert_array_equal(atom.position, [-12.345, 0.5, 99.999])


def test_altloc_keeps_highest_occupancy():
    text = "\n".join([
        atom_line(1, "CA", "SER", "A", 5, (0, 0, 0), occ=0.6, alt="A"),
        atom_line(2, "CA", "SER", "A", 5, (1, 1, 1), occ=0.4, alt="B"),
    ])
    model = parse_pdb(text)
    assert len(model) == 1
    np.testing.assert_array_equal(model.atoms[0].position, [0, 0, 0])


def test_altloc_higher_later_conformer_wins_and_ties_go_first():
    text = "\n".join([
        atom_line(1, "CA", "SER", "A", 5, (0, 0, 0), occ=0.3, alt="A"),
        atom_line(2, "CA", "SER", "A", 5, (1, 1, 1), occ=0.7, alt="B"),
        atom_line(3, "CB", "SER", "A", 5, (2, 2, 2), occ=0.5, alt="A"),
        atom_line(4, "CB", "SER", "A", 5, (3, 3, 3), occ=0.5, alt="B"),
    ])
    model = parse_pdb(text)
    pos = {a.name: a.position for a in model.atoms}
    np.testing.assert_array_equal(pos["CA"], [1, 1, 1])
    np.testing.assert_array_equal(pos["CB"], [2, 2, 2])


def test_first_model_only():
    text = "\n".join([
        "MODEL        1",
        atom_line(1, "CA", "ALA", "A", 1, (0, 0, 0)),
        "ENDMDL",
        "MODEL        2",
        atom_line(1, "CA", "ALA", "A", 1, (5, 5, 5)),
        atom_line(2, "CB", "ALA", "A", 1, (6, 5, 5)),
        "ENDMDL",
    ])
    model = parse_pdb(text)
    assert len(model) == 1
    np.testing.assert_array_equal(model.atoms[0].position, [0, 0, 0])


def test_hetatm_ignored_by_default_and_flag_includes():
    text = "\n".join([
        atom_line(1, "CA", "ALA", "A", 1, (0, 0, 0)),
        atom_line(2, "FE", "HEM", "A", 200, (3, 3, 3), record="HETATM", element="FE"),
    ])
    assert len(parse_pdb(text)) == 1
    model = parse_pdb(text, include_hetero=True)
    assert len(model) == 2
    assert model.atoms[1].element == "FE" and model.atoms[1].hetero


def test_malformed_coordinate_reports_line():
    good = atom_line(1, "CA", "ALA", "A", 1, (0, 0, 0))
    bad = good[:30] + "   x.abc" + good[38:]
    with pytest.raises(StructureParseError) as info:
        parse_pdb(good.replace("    1 ", "    2 ", 1) + "\n" + bad)
    assert info.value.line == 2


def test_empty_model_is_an_error():
    with pytest.raises(StructureParseError):
        parse_pdb("HEADER    nothing here\nEND\n")


def test_occupancy_out_of_range_is_an_error():
    with pytest.raises(StructureParseError):
        parse_pdb(atom_line(1, "CA", "ALA", "A", 1, (0, 0, 0), occ=1.5))


@pytest.mark.parametrize("name", ["1US0.pdb", "1K1I.pdb", "1QBS.pdb", "1A1P.pdb"])
def test_real_entries_match_line_scan_oracle(data_dir, name):
    model = read_structure(data_dir / name)
    assert len(model) == line_scan_atom_count(data_dir / name)
    assert len({a.serial for a in model.atoms}) == len(model)


def test_multimodel_entry_reads_first_model(data_dir):
    model = read_structure(data_dir / "1A1P.pdb")
    text = (data_dir / "1A1P.pdb").read_text()
    first = text.split("ENDMDL")[0]
    assert len(model) == sum(1 for ln in first.splitlines() if ln.startswith("ATOM  "))


@given(
    x=st.floats(-999.0, 9999.0, allow_nan=False).map(lambda v: round(v, 3)),
    y=st.floats(-999.0, 9999.0, allow_nan=False).map(lambda v: round(v, 3)),
    occ=st.floats(0.0, 1.0).map(lambda v: round(v, 2)),
    seq=st.integers(-999, 9999),
    name=st.sampled_from(["N", "CA", "C", "O", "CB", "OG1", "HD21", "NE2"]),
    resname=st.sampled_from(AMINO_ACIDS),
)
@settings(max_examples=200, deadline=None)
def test_any_well_formed_line_parses(x, y, occ, seq, name, resname):
    atom = parse_pdb(atom_line(7, name, resname, "C", seq, (x, y, -1.5), occ=occ)).atoms[0]
    assert atom.position[0] == pytest.approx(x, abs=5e-4)
    assert atom.position[1] == pytest.approx(y, abs=5e-4)
    assert atom.residue_seq == seq and atom.name == name and atom.occupancy == pytest.approx(occ)


@given(junk=st.text(alphabet="abc!?#", min_size=1, max_size=8), column=st.sampled_from([30, 38, 46]))
@settings(max_examples=60, deadline=None)
def test_corrupted_coordinate_gives_located_error(junk, column):
    line = atom_line(1, "CA", "ALA", "A", 1, (1, 2, 3))
    bad = line[:column] + junk.rjust(8)[:8] + line[column + 8:]
    with pytest.raises(StructureParseError) as info:
        parse_pdb(bad)
    assert info.value.line == 1


# -- PQR ------------------------------------------------------------------


def test_pqr_row_carries_charge_and_radius():
    model = parse_pqr("ATOM      1  CA  ALA A   1      1.000   2.000   3.000 -0.3000 1.7000\n")
    assert model.atoms[0].charge == -0.3 and model.atoms[0].vdw_radius == 1.7


def test_pqr_without_chain_field():
    model = parse_pqr("ATOM      1  N   GLY     7      1.000   2.000   3.000  0.1000 1.8240\n")
    atom = model.atoms[0]
    assert atom.residue_seq == 7 and atom.charge == 0.1 and atom.vdw_radius == 1.824


def test_pqr_non_numeric_charge_reports_line():
    text = ("ATOM      1  N   GLY A   7      1.000   2.000   3.000  0.1000 1.8240\n"
            "ATOM      2  CA  GLY A   7      1.000   2.000   4.000  abc 1.8240\n")
    with pytest.raises(StructureParseError) as info:
        parse_pqr(text)
    assert info.value.line == 2


def test_pqr_hydrogens_are_element_h(data_dir):
    model = read_structure(data_dir / "1AFS_amber.pqr")
    hydrogens = [a for a in model.atoms if a.name.startswith("H") or a.name[:1].isdigit() and "H" in a.name]
    assert hydrogens
    assert all(a.element == "H" for a in hydrogens)
    assert all(a.charge is not None and a.vdw_radius is not None for a in model.atoms)


def test_pqr_round_trip_keeps_charges(data_dir):
    model = read_structure(data_dir / "1AFS_amber.pqr")
    again = parse_pqr(write_pqr(model))
    assert len(again) == len(model)
    assert [a.charge for a in again.atoms] == [a.charge for a in model.atoms]
    assert [a.vdw_radius for a in again.atoms] == [a.vdw_radius for a in model.atoms]
    np.testing.assert_array_equal(again.coordinates, model.coordinates)


def test_read_from_file_object():
    text = atom_line(1, "CA", "ALA", "A", 1, (0, 0, 0))
    assert len(parse_pdb(io.StringIO(text))) == 1
    assert len(parse_pdb(text.encode())) == 1


# -- chains and sites -----------------------------------------------------


def two_chain_model():
    text = chain_text(["ALA", "GLY"], "A").replace("END\n", "") + chain_text(["SER"], "B").replace(
        "    1 ", "   11 ")
    lines = [ln for ln in text.splitlines() if ln.startswith("ATOM")]
    lines = [ln[:6] + f"{k + 1:5d}" + ln[11:] for k, ln in enumerate(lines)]
    return parse_pdb("\n".join(lines))


def test_select_single_chain():
    model = two_chain_model()
    sub = select_chains(model, {"A"})
    assert {a.chain_id for a in sub.atoms} == {"A"}
    assert [s.chain_id for s in sub.sites] == ["A", "A"]


def test_select_all_chains_is_identity():
    model = two_chain_model()
    same = select_chains(model, {"A", "B"})
    assert len(same) == len(model)
    assert [a.serial for a in same.atoms] == [a.serial for a in model.atoms]


def test_select_missing_chain_names_request():
    with pytest.raises(SelectionError, match="Z"):
        select_chains(parse_pdb(chain_text(["ALA"])), {"Z"})


def test_missing_ca_is_skipped_and_counted():
    lines = [ln for ln in chain_text(["ALA", "LEU"]).splitlines() if not (" CA " in ln and "LEU" in ln)]
    model = parse_pdb("\n".join(lines))
    assert [s.residue_name for s in model.sites] == ["ALA"]
    assert model.site_report.incomplete_backbone == 1


def test_263_residue_chain_gives_263_sites():
    names = [AMINO_ACIDS[k % 20] for k in range(263)]
    model = parse_pdb(chain_text(names))
    sites = extract_sites(model)
    assert len(sites) == 263
    assert [s.label for s in sites] == [CLASS_INDEX[n] for n in names]


def test_mse_maps_to_met_even_without_hetero_flag():
    lines = residue_lines(1, "MSE", "A", 1, (0, 0, 0))
    lines = [ln.replace("ATOM  ", "HETATM") for ln in lines]
    lines.append(atom_line(6, "SE", "MSE", "A", 1, (1.0, -1.0, 3.0), record="HETATM", element="SE"))
    sites = extract_sites(parse_pdb("\n".join(lines)))
    assert len(sites) == 1
    assert sites[0].label == CLASS_INDEX["MET"] and sites[0].residue_name == "MET"


def test_nonstandard_residues_dropped_with_count():
    model = parse_pdb(chain_text(["ALA", "PTR", "GLY"]))
    assert [s.residue_name for s in model.sites] == ["ALA", "GLY"]
    assert model.site_report.nonstandard == 1
    assert model.site_report.nonstandard_names == {"PTR": 1}


def test_stretched_backbone_is_rejected():
    lines = chain_text(["ALA"]).splitlines()
    lines = [atom_line(2, "CA", "ALA", "A", 1, (0.0, 0.0, 5.0)) if " CA " in ln else ln for ln in lines]
    model = parse_pdb("\n".join(lines))
    assert model.sites == [] and model.site_report.bad_geometry == 1


def test_extract_sites_is_idempotent(data_dir):
    model = read_structure(data_dir / "1K1I.pdb")
    a, b = extract_sites(model), extract_sites(model)
    assert [s.site_id for s in a] == [s.site_id for s in b]
    assert [s.atom_ids for s in a] == [s.atom_ids for s in b]


@pytest.mark.parametrize("name", ["1US0.pdb", "1K1I.pdb", "1QBS.pdb"])
def test_site_invariants_on_real_entries(data_dir, name):
    model = read_structure(data_dir / name)
    for site in model.sites:
        assert 0 <= site.label < 20
        bb = site.backbone
        for a, b in (("N", "CA"), ("CA", "C")):
            assert 0.5 < np.linalg.norm(bb[a] - bb[b]) < 3.0
        assert all(0 <= i < len(model) for i in site.atom_ids)
        assert set(site.sidechain_atom_ids) <= set(site.atom_ids)


def test_duplicate_serials_rejected():
    model = parse_pdb(chain_text(["ALA"]))
    with pytest.raises(StructureParseError):
        ProteinModel(model.atoms + model.atoms[:1])


# -- sampling -------------------------------------------------------------


def fake_sites(n):
    return list(range(n))


@pytest.mark.parametrize("n, expected", [(150, 150), (200, 200), (250, 100)])
def test_sampling_rule(n, expected):
    out = sample_sites(fake_sites(n), seed=3)
    assert len(out) == expected
    assert len(set(out)) == expected


def test_cap_above_threshold_rejected():
    with pytest.raises(ValueError):
        sample_sites(fake_sites(10), threshold=5, cap=6)


@given(n=st.integers(0, 600), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_sampling_subset_ordered_deterministic(n, seed):
    sites = fake_sites(n)
    a = sample_sites(sites, seed=seed)
    assert a == sample_sites(sites, seed=seed)
    assert a == sorted(a)
    assert len(set(a)) == len(a)
    assert set(a) <= set(sites)
    assert len(a) == (100 if n > 200 else n)

"""Derive the shipped heavy-atom charge table from AMBER99 all-atom charges.

Each hydrogen's partial charge is folded onto the heavy atom it is bonded to,
which keeps every residue's net charge while dropping explicit hydrogens.

Usage::

    python scripts/derive_charge_table.py AMBER.DAT AA.xml > src/microcpd/data/charges.txt

Both input files ship with the pdb2pqr source distribution (``pdb2pqr/dat``).
"""

import sys
import xml.etree.ElementTree as ET
from collections import defaultdict

# AMBER residue variant used for each standard residue (neutral His/Cys).
VARIANT = {"HIS": "HIE", "CYS": "CYS"}
STANDARD = (
    "ALA ARG ASN ASP CYS GLN GLU GLY HIS ILE LEU LYS MET PHE PRO SER THR TRP TYR VAL"
).split()


def main(dat_path, xml_path):
    charges = defaultdict(dict)
    with open(dat_path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            res, atom, q = line.split()[:3]
            charges[res][atom] = float(q)

    bonds = defaultdict(dict)
    for residue in ET.parse(xml_path).getroot().iter("residue"):
        name = residue.findtext("name")
        for atom in residue.iter("atom"):
            bonds[name][atom.findtext("name")] = [b.text for b in atom.iter("bond")]

    print("# residue atom charge(e); united-atom AMBER99 (H folded onto bonded heavy atom)")
    for res in STANDARD:
        table = charges[VARIANT.get(res, res)]
        heavy = {a: q for a, q in table.items() if not a.startswith("H")}
        for atom, q in table.items():
            if not atom.startswith("H"):
                continue
            partners = [b for b in bonds[res].get(atom, []) if not b.startswith("H")]
            if atom == "H":
                partners = ["N"]
            if len(partners) != 1:
                raise SystemExit(f"cannot place {res} {atom}: {partners}")
            heavy[partners[0]] += q
        for atom, q in heavy.items():
            print(f"{res} {atom} {q:.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:3])

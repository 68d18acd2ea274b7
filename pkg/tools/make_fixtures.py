"""Regenerate the shipped integral fixtures (needs pyscf, not a runtime dependency)."""
from pathlib import Path

import numpy as np
from pyscf import fci, gto, mcscf, scf
from pyscf.tools import fcidump

OUT = Path(__file__).resolve().parents[1] / "src" / "qcafqmc" / "data"

H4 = "H 0 0 0; H 0 0 1.23; H 1.23 0 0; H 1.23 0 1.23"


def write_slater(path, cup, cdn):
    n, na = cup.shape
    nb = cdn.shape[1]
    with open(path, "w") as f:
        f.write(f"SLATER v1 {n} {na} {nb}\n")
        for block in (cup, cdn):
            for row in block:
                f.write(" ".join(f"{v.real:.16e} {v.imag:.16e}" for v in row.astype(complex)) + "\n")


def uhf_in_mo_basis(mol, mf):
    umf = scf.UHF(mol)
    dm = umf.get_init_guess()
    dm[0][0, 0] += 0.3
    dm[1][1, 1] += 0.3
    umf.kernel(dm)
    mo1 = umf.stability()[0]
    umf.kernel(umf.make_rdm1(mo1, umf.mo_occ))
    s = mol.intor("int1e_ovlp")
    proj = mf.mo_coeff.T @ s
    na, nb = mol.nelec
    cup = proj @ umf.mo_coeff[0][:, :na]
    cdn = proj @ umf.mo_coeff[1][:, :nb]
    print("UHF", umf.e_tot)
    return cup, cdn


def main():
    mol = gto.M(atom=H4, basis="sto-3g", unit="Angstrom", verbose=0)
    mf = scf.RHF(mol).run()
    fcidump.from_scf(mf, str(OUT / "h4_sto3g.fcidump"), tol=1e-14)
    print("H4 FCI", fci.FCI(mf).kernel()[0])
    cup, cdn = uhf_in_mo_basis(mol, mf)
    write_slater(OUT / "h4_sto3g_uhf.slater", cup, cdn)

    mol = gto.M(atom="H 0 0 0; H 0 0 0.74", basis="sto-3g", unit="Angstrom", verbose=0)
    mf = scf.RHF(mol).run()
    fcidump.from_scf(mf, str(OUT / "h2_sto3g.fcidump"), tol=1e-14)
    print("H2 FCI", fci.FCI(mf).kernel()[0])

    # two-space fixture: rectangular H4/6-31G (singlet sector ground state), 8 orbitals
    mol = gto.M(atom="H 0 0 0; H 0 0 0.9; H 1.5 0 0; H 1.5 0 0.9", basis="6-31g", unit="Angstrom", verbose=0)
    mf = scf.RHF(mol).run()
    fcidump.from_scf(mf, str(OUT / "h4rect_631g.fcidump"), tol=1e-14)
    print("H4/6-31G FCI", fci.FCI(mf).kernel()[0])
    print("H4/6-31G CASCI(4,4)", mcscf.CASCI(mf, 4, 4).kernel()[0])


if __name__ == "__main__":
    main()

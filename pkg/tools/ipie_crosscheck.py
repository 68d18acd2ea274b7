"""External cross-check of the UHF-trial AFQMC energy with ipie (not a dependency).

Usage: python tools/ipie_crosscheck.py {uhf|rhf} N_BLOCKS
"""
import sys, numpy as np
from pathlib import Path
DATA = Path(__file__).resolve().parents[1] / "src" / "qcafqmc" / "data"
from qcafqmc.hamio import read_fcidump, cholesky_factorize
from qcafqmc.slater import read_slater
from ipie.hamiltonians.generic import Generic as HamGeneric
from ipie.trial_wavefunction.single_det import SingleDet
from ipie.qmc.afqmc import AFQMC
from ipie.analysis.extraction import extract_observable
ham = read_fcidump(DATA / "h4_sto3g.fcidump")
ch = cholesky_factorize(ham, 1e-10)
n = ham.n_orb; L = np.asarray(ch.vectors)
H = HamGeneric(h1e=np.array([ham.h1, ham.h1]), chol=L.reshape(len(L), n*n).T.copy(), ecore=ham.e_core)
which = sys.argv[1]
if which == "uhf":
    d = read_slater(DATA / "h4_sto3g_uhf.slater")
    wfn = np.hstack([d.up.real, d.dn.real])
else:
    wfn = np.hstack([np.eye(n)[:, :2], np.eye(n)[:, :2]])
trial = SingleDet(wfn, (2, 2), n)
trial.build(); trial.half_rotate(H)
q = AFQMC.build((2, 2), H, trial, num_walkers=640, num_steps_per_block=25, num_blocks=int(sys.argv[2]),
                timestep=0.005, stabilize_freq=5, seed=7, pop_control_freq=5, verbose=False)
q.run(); q.finalise(verbose=False)
e = extract_observable(q.estimators.filename, "energy")
et = np.asarray(e["ETotal"])[21:]; print(which, "ipie ETotal mean", et.mean(), "sem(block10)", et.reshape(-1,10).mean(1).std(ddof=1)/np.sqrt(len(et)//10))

"""Compare the reverse-mode hypergradients with finite differences on a toy problem.

The loss network is tuned only through its effect on the student's SGD
trajectory, so its gradient has to be carried back through every step.
"""

from dynloss.oracles import TinySpec, check_rmd, check_teacher, check_unroll_identity, tiny_problem

for n in (1, 3):
    prob = tiny_problem(TinySpec(N=n))
    err, _ = check_rmd(prob)
    print(f"N={n}  loss-network gradient vs finite differences: max rel err {err:.1e}")
    err, _ = check_unroll_identity(prob)
    print(f"N={n}  reverse pass vs differentiating the unrolled steps: {err:.1e}")
    err, detail = check_teacher(prob)
    print(f"N={n}  teacher gradient ({detail}): {err:.1e}")

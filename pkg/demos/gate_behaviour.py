"""How the gated fusion blends its two inputs.

With every fusion weight zeroed the gate sits at 0.5. Pushing the gate bias
up makes the output follow the main branch; pushing it down follows the
auxiliary one.
"""

import numpy as np

from gafm import Tensor, precision
from gafm.blocks import GFFM, gffm_fuse


def demo() -> None:
    rng = np.random.default_rng(0)
    main = Tensor(rng.standard_normal((1, 2, 3, 3)))
    aux = Tensor(rng.standard_normal((1, 2, 3, 3)))

    g = GFFM(2)
    g.to(np.float64)
    for conv in (g.gate_conv, g.mix_conv, g.out_conv):
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0
    # output conv copies the fused map straight through
    g.out_conv.weight.data[:, :, 0, 0] = np.eye(2)
    # mix conv forwards the auxiliary half of concat(main, aux)
    g.mix_conv.weight.data[:, 2:, 0, 0] = np.eye(2)

    for bias in (-40.0, 0.0, 40.0):
        g.gate_conv.bias.data[...] = bias
        out = gffm_fuse(g, main, aux).data
        gate = float(g.gate(main, aux).data.mean())
        d_main = np.abs(out - main.data).max()
        d_aux = np.abs(out - aux.data).max()
        print(f"gate bias {bias:+5.0f}: gate {gate:.3g}  |out-main| {d_main:.2e}  |out-aux| {d_aux:.2e}")


if __name__ == "__main__":
    with precision("double"):
        demo()

class PositivityError(ValueError):
    """A quasiprobability entry is non-positive where a logarithm is needed."""


class NegativeCountFailure(ValueError):
    """Virtual counts N_W contain a negative entry; the trial is unusable."""

    def __init__(self, n_w):
        self.n_w = n_w
        super().__init__(f"negative virtual count in N_W = {n_w.tolist()}")

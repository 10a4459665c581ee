"""
Conditional diffusion with learnable variance schedules, and the
zero-mean variant that diffuses residuals around a learned conditional
mean.

Data batches are arrays of shape (B, ...). The noise predictor is
called as eps_predictor(y_t, t, X) with `t` a (B,) array of continuous
times in [0, 1]; the mean predictor as mean_predictor(X). Both may be
`predictor.Network` objects or plain callables returning arrays or
Tensors (oracles in tests).
"""

from chromaphase.predictor import tensor as T
from chromaphase.util import ScheduleError

MODES = ("zmd", "cvdm")


def call_predictor(predictor, *args):
    """
    Call `predictor` and return its output as a Tensor.
    """
    return T.as_tensor(predictor(*args))


class DiffusionModel:
    """
    Class bundling the noise predictor, the mean predictor, the
    schedule and the loss weights: `a` (schedule curvature), `omega`
    (mean loss) and the number of inference steps `T`. In "zmd" mode
    the diffusion runs on y - mu(X); in "cvdm" mode on y itself and the
    mean predictor is unused.
    """

    def __init__(self, eps_predictor, schedule, mean_predictor=None, a=1e-3, omega=2.0, T=200, mode="zmd"):
        if mode not in MODES:
            raise ScheduleError("unknown diffusion mode {}", repr(mode))
        if mode == "zmd" and mean_predictor is None:
            raise ScheduleError("zero-mean diffusion needs a mean predictor")
        if int(T) < 1:
            raise ScheduleError("number of timesteps must be at least 1, got {}", T)
        if a < 0 or omega < 0:
            raise ScheduleError("loss weights must be non-negative (a={}, omega={})", a, omega)
        self.eps_predictor = eps_predictor
        self.mean_predictor = mean_predictor
        self.schedule = schedule
        self.a = float(a)
        self.omega = float(omega)
        self.T = int(T)
        self.mode = mode

    def _components(self):
        parts = [("eps.", self.eps_predictor), ("mean.", self.mean_predictor), ("", self.schedule)]
        return [(prefix, part) for prefix, part in parts if part is not None]

    def parameters(self):
        """
        Return every trainable Tensor, each once, in a fixed order.
        """
        seen = set()
        params = []
        for _, part in self._components():
            for p in getattr(part, "parameters", lambda: [])():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state(self):
        """
        Return {name: array} of all parameters.
        """
        state = {}
        for prefix, part in self._components():
            if hasattr(part, "state"):
                for name, value in part.state().items():
                    state[prefix + name] = value
        return state

    def load_state(self, state):
        for prefix, part in self._components():
            if hasattr(part, "load_state"):
                part.load_state(
                    {name[len(prefix) :]: value for name, value in state.items() if name.startswith(prefix)}
                )

    def _to_json(self):
        return {"a": self.a, "omega": self.omega, "T": self.T, "mode": self.mode}

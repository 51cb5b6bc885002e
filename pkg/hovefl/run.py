"""
Command line entry: `hovefl run <config>`, `hovefl compare <spec>`, `hovefl plot <dir>`.

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration, 3 training divergence.
Log verbosity follows $HOVEFL_LOG_LEVEL.
"""
import sys
import traceback

from fire import Fire
from rich.console import Console

from hovefl.core import entry
from hovefl.scripts.plot import emit_plot_data
from hovefl.utilities.config import apply_overrides, load_comparison, load_config
from hovefl.utilities.errors import ConfigError, DivergenceError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

console = Console(stderr=True)


def _guarded(action) -> int:
    try:
        return action()
    except ConfigError as e:
        console.print(f"[red]Configuration error[/red] {e}")
        return EXIT_CONFIG
    except DivergenceError as e:
        console.print(f"[red]Divergence[/red] {e}")
        return EXIT_DIVERGENCE
    except Exception as e:
        console.print(f"[red]Failed[/red] {e}")
        console.print(traceback.format_exc())
        return EXIT_FAILURE


class HoVeFLCli:
    """Hybrid horizontal/vertical federated learning simulator."""

    def __init__(self, quiet: bool = False):
        self.printing = not quiet

    def run(self, config: str, seed: int | None = None, out: str | None = None, rounds: int | None = None):
        """
        Train one configured experiment and write history.csv, analysis.json and config_echo.json.

        Args:
            config: path to a run configuration (JSON)
            seed: overrides `seed`
            out: overrides `output_dir`
            rounds: overrides `train.rounds`
        """
        def action():
            cfg = apply_overrides(load_config(config), seed=seed, out=out, rounds=rounds)
            entry.run(cfg, printing=self.printing)
            return EXIT_OK

        self._exit(_guarded(action))

    def compare(self, spec: str, seed: int | None = None, out: str | None = None, rounds: int | None = None):
        """
        Run every arm of a device-mix comparison on paired seeds.

        Args:
            spec: path to a comparison spec (JSON)
            seed: run a single seed instead of the spec's seed list
            out: overrides `output_dir`
            rounds: overrides `base.train.rounds`
        """
        def action():
            comparison = apply_overrides(load_comparison(spec), seed=seed, out=out, rounds=rounds)
            outcome = entry.compare(comparison, printing=self.printing)
            if outcome.diverged:
                return EXIT_DIVERGENCE
            return EXIT_FAILURE if outcome.failures else EXIT_OK

        self._exit(_guarded(action))

    def plot(self, history_dir: str):
        """Write train_loss.dat, test_loss.dat (and bound.dat) next to history.csv."""
        def action():
            for path in emit_plot_data(history_dir):
                if self.printing:
                    console.print(f"wrote {path}")
            return EXIT_OK

        self._exit(_guarded(action))

    @staticmethod
    def _exit(code: int) -> None:
        if code != EXIT_OK:
            raise SystemExit(code)


def main():
    """
    Entry point for the hovefl command line tool.
    """
    Fire(HoVeFLCli)


if __name__ == "__main__":
    sys.exit(main())

import contextlib
import dataclasses
import os
import tempfile


umask = None


class InputError(ValueError):
    '''
    Malformed or inconsistent user input: feeder files, scenarios, profiles.
    '''


class NumericalError(ArithmeticError):
    '''
    A numerical procedure failed: a decomposition, a non-finite iterate or a
    power flow that did not settle.
    '''


def load_umask_unsafe():
    # Reading the umask means setting it, so this must run before any worker
    # threads start writing files
    global umask

    if os.name != 'nt' and umask is None:
        umask = os.umask(0o777)
        os.umask(umask)


@dataclasses.dataclass(frozen=True)
class Range:
    '''
    Half-open interval of control rounds.
    '''

    start: int
    end: int

    def __repr__(self) -> str:
        return f'[{self.start}, {self.end})'

    def __contains__(self, item) -> bool:
        return self.start <= item < self.end


@contextlib.contextmanager
def open_output_file(path, mode='wb'):
    '''
    Write <path> through a sibling temporary file that is renamed over it once
    the block exits cleanly. A failed write leaves any previous result intact.
    '''

    directory = os.path.dirname(os.path.abspath(path))

    with tempfile.NamedTemporaryFile(mode=mode, dir=directory,
                                     delete=False) as f:
        try:
            yield f
            f.flush()

            if os.name == 'nt':
                # Open handles block the rename
                f.close()
                with contextlib.suppress(FileNotFoundError):
                    os.unlink(path)
            else:
                # Temporary files are created 0600
                load_umask_unsafe()
                os.fchmod(f.fileno(), 0o666 & ~umask)

            os.replace(f.name, path)
        except BaseException:
            if os.name == 'nt':
                f.close()

            os.unlink(f.name)
            raise


def thread_count(jobs: int) -> int:
    '''
    Number of workers for <jobs> independent runs, capped by the
    GRIDVOLT_THREADS environment variable.
    '''

    limit = os.environ.get('GRIDVOLT_THREADS')
    if limit is None:
        workers = os.cpu_count() or 1
    else:
        try:
            workers = int(limit)
        except ValueError:
            raise InputError(f'GRIDVOLT_THREADS is not an integer: {limit!r}')
        if workers < 1:
            raise InputError(f'GRIDVOLT_THREADS must be positive: {workers}')

    return max(1, min(workers, jobs))

from icode_rca.errors import IcodeError


class RunResult:
    """
    Represents the outcome of one CLI command.
    - command: The subcommand that ran.
    - artifacts: Paths written by the command, keyed by role.
    - error: The IcodeError that stopped the command, if any.
    - failed_cells: Benchmark cells that failed while the suite continued.

    The result_code method returns the process exit status:
    - 0: Success
    - 2: Failure, invalid configuration, shape or checkpoint
    - 3: Failure, numerical divergence
    - 4: Failure, missing or unreadable files
    A benchmark with failed cells reports the code of its first failure.
    """

    def __init__(self, command):
        self.command = command
        self.artifacts = {}
        self.error = None
        self.failed_cells = []
        self.summary = None

    def add_artifact(self, role, path):
        self.artifacts[role] = path
        return self

    def set_error(self, error):
        self.error = error
        return self

    def add_failed_cell(self, cell_id, error):
        self.failed_cells.append((cell_id, error))

    def result_code(self):
        if self.error is not None:
            return self.error.exit_code if isinstance(self.error, IcodeError) else 1
        if self.failed_cells:
            error = self.failed_cells[0][1]
            return error.exit_code if isinstance(error, IcodeError) else 1
        return 0

    def __repr__(self):
        return f"RunResult(command={self.command}, "\
            f"code={self.result_code()}, "\
            f"error={self.error}, "\
            f"failed_cells={[cell for cell, _ in self.failed_cells]}, "\
            f"artifacts={sorted(self.artifacts)})"

class MelError(Exception):
    """Base class for meta-experience learning errors."""


class ConfigError(MelError, ValueError):
    pass


class ContractError(MelError, ValueError):
    pass


class SerializationError(MelError):
    def __init__(self, message: str, symbol: str | None = None):
        super().__init__(message)
        self.symbol = symbol


class TaskFileError(MelError):
    pass


class EventLogError(MelError):
    def __init__(self, path: str, line_no: int, detail: str):
        super().__init__(f"{path}:{line_no}: {detail}")
        self.path = path
        self.line_no = line_no
        self.detail = detail


class CheckpointError(MelError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path
        self.detail = detail


class AnalystError(MelError):
    pass


class AnalystTransportError(AnalystError):
    def __init__(
        self,
        message: str,
        status_code: int | None = None,
        detail: str | None = None,
        *,
        retriable: bool = True,
    ):
        super().__init__(message)
        self.status_code = status_code
        self.detail = detail
        self.retriable = retriable


class AnalysisParseError(AnalystError):
    def __init__(self, message: str, detail: str | None = None):
        super().__init__(message)
        self.detail = detail

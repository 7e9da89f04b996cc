class M2Error(Exception):
    """Base exception for all framework errors."""


class ValidationError(M2Error):
    """Raised when inputs, configs or files violate a documented precondition."""

    def __init__(self, action_name: str, message: str, field: str | None = None) -> None:
        self.action_name = action_name
        self.message = message
        self.field = field
        detail = message
        if field is not None:
            detail = f'{message} (field={field})'
        super().__init__(f'{action_name} 失败: {detail}')


class ConfigurationError(ValidationError):
    """Invalid model, head, optimizer or run configuration."""


class ShapeError(ValidationError):
    """Tensor or array dimensions do not match the contract."""


class RegistrationError(ValidationError):
    """A task id is not registered where it is required."""


class ManifestError(ValidationError):
    """Manifest or synthetic plan does not validate; ``field`` holds the JSON path."""


class DataError(ValidationError):
    """A sample is rejected (corrupt image, degenerate box, empty dataset)."""


class UndefinedMetricError(ValidationError):
    """The metric is undefined for the given inputs (e.g. single-class AUC)."""


class UndefinedDeltaError(UndefinedMetricError):
    """Relative change requested against a zero baseline."""


class RegistryMismatchError(ValidationError):
    """Two reports or checkpoints disagree on their task registries."""

    def __init__(self, action_name: str, differing_ids: list[str]) -> None:
        self.differing_ids = sorted(differing_ids)
        super().__init__(action_name, f"任务集合不一致: {', '.join(self.differing_ids)}")


class NumericError(M2Error):
    """Raised on non-finite values; carries where training was when it happened."""

    def __init__(
        self,
        action_name: str,
        message: str,
        *,
        epoch: int | None = None,
        task_id: str | None = None,
        batch: int | None = None,
    ) -> None:
        self.action_name = action_name
        self.message = message
        self.epoch = epoch
        self.task_id = task_id
        self.batch = batch
        context = [
            f'{key}={value}'
            for key, value in (('epoch', epoch), ('task', task_id), ('batch', batch))
            if value is not None
        ]
        detail = message
        if context:
            detail = f"{message} ({', '.join(context)})"
        super().__init__(f'{action_name} 失败: {detail}')

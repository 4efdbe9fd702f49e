import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}


class CriterionRecorder:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            detail = f"{detail}; {exc_type.__name__}: {exc}".strip("; ")
        _CRITERIA[self.number] = (status, f"{self.title}" + (f" [{detail}]" if detail else ""))
        line = f"CRITERION {self.number:2d} {status}: {_CRITERIA[self.number][1]}"
        print(line)
        return False


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:2d} {status}: {text}")

# Copyright (c) 2026, saml-pipeline contributors.

"""Exception hierarchy shared by the pipeline.

Every error knows the CLI exit code it maps to, so ``saml.cli`` never has to guess.
"""

import typing


class InputError(ValueError):
    """Bad input: missing corpus, broken layout, invariant violation, bad config."""

    exit_code = 2


class SegmenterUnavailableError(RuntimeError):
    """The configured promptable segmenter cannot be constructed."""

    exit_code = 3


class BackendError(RuntimeError):
    """A segmenter call failed in a way that may succeed on retry.

    ``instance_ids`` names the prompts that failed within one patch, ``failures``
    maps patch ids to their failing instance ids when raised for a whole corpus.
    """

    exit_code = 3

    def __init__(
        self,
        message: str,
        instance_ids: typing.Sequence[str] = (),
        failures: typing.Union[dict[str, list[str]], None] = None,
    ):
        super().__init__(message)
        self.instance_ids = list(instance_ids)
        self.failures = dict(failures or {})


class ArtifactMissingError(FileNotFoundError):
    """A pipeline artifact (checkpoint, labelmaps, boxes) is not where expected."""

    exit_code = 4


class ContractViolationError(RuntimeError):
    """A component returned something its interface forbids."""

    exit_code = 5

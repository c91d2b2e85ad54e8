class InvalidInput(ValueError):
    pass


class InvalidConfig(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


class InvalidPrompt(ValueError):
    pass


class LiftingFailed(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    """Raised when a training loss term turns NaN/Inf.

    ``term`` names the offending loss and ``objects`` lists the object ids of
    the batch that produced it.
    """

    def __init__(self, term, objects, value):
        self.term = term
        self.objects = list(objects)
        self.value = value
        super().__init__(f"non-finite {term}={value} for objects {self.objects}")

class HybridWMException(Exception):
    """ Base exception for all exceptions in the hybridwm package
    """
    pass


class ConfigException(HybridWMException):
    """A config value is missing or cannot be parsed"""
    pass


class ConfigValidationException(ConfigException):
    """One or more config values are invalid. Holds all messages at once"""

    def __init__(self, messages):
        """

        Parameters
        ----------
        messages: List[str]
            Every validation problem found, in order
        """
        self.messages = list(messages)
        super().__init__("Invalid config:\n" + "\n".join(f"  - {m}" for m in self.messages))

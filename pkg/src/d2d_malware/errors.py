"""Exception hierarchy; each class carries a stable machine-readable ``code``."""


class SimulationError(Exception):
    code = "error"


class InvalidParametersError(SimulationError, ValueError):
    code = "invalid_parameters"


class DiscretizationContractError(InvalidParametersError):
    code = "discretization_contract_violated"


class DegenerateTessellationError(SimulationError, ValueError):
    code = "degenerate_tessellation"


class InstanceTooLargeError(SimulationError, ValueError):
    code = "instance_too_large"


class UnreachableDestinationError(SimulationError):
    code = "unreachable_destination"


class IsolatedAgentError(SimulationError):
    code = "isolated_agent"


class ContractViolationError(SimulationError, ValueError):
    code = "contract_violation"

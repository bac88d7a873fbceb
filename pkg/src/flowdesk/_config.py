"""
Run configurations stored as ASDF files.

A saved run config is an ASDF tree ``{class, name, parameters}`` validated
against the ``run_config-1.0.0`` schema.
"""

from copy import deepcopy

import asdf

from .utilities import get_fully_qualified_class_name

_CONFIG_SCHEMA_URI = "http://flowdesk.org/schemas/flowdesk/run_config-1.0.0"


class RunConfig:
    """
    Run configuration container.

    Parameters
    ----------
    class_name : str
        Fully-qualified Step subclass name.
    name : str
        Nickname
    parameters : dict
        Parameters indexed by parameter name; sub-configs are nested dicts.
    """

    def __init__(self, class_name, name, parameters):
        self._class_name = class_name
        self._name = name
        self._parameters = parameters

    @property
    def class_name(self):
        return self._class_name

    @property
    def name(self):
        return self._name

    @property
    def parameters(self):
        return self._parameters

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return False

        return (
            self.class_name == other.class_name
            and self.name == other.name
            and self.parameters == other.parameters
        )

    def _to_tree(self):
        return {
            "class": self.class_name,
            "name": self.name,
            "parameters": self.parameters,
        }

    def to_asdf(self):
        """
        Convert this config to an AsdfFile, which may be
        used to write the config to a file.

        Returns
        -------
        asdf.AsdfFile
        """
        result = asdf.AsdfFile(self._to_tree())
        _validate_asdf(result, _CONFIG_SCHEMA_URI)
        return result

    @classmethod
    def from_asdf(cls, asdf_file):
        """
        Create a RunConfig from an open AsdfFile.

        Raises
        ------
        asdf.ValidationError
            If the file does not validate against the schema.
        """
        _validate_asdf(asdf_file, _CONFIG_SCHEMA_URI)
        tree = asdf_file.tree
        return cls(tree["class"], tree["name"], _plain(deepcopy(tree["parameters"])))


def _plain(value):
    # asdf hands back its own node types; configobj wants dicts and lists.
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def export_config(step):
    """
    Export a step's current parameters to a RunConfig object.

    Parameters
    ----------
    step : flowdesk.Step

    Returns
    -------
    RunConfig
    """
    return RunConfig(get_fully_qualified_class_name(step), step.name, step.get_pars())


def _validate_asdf(asdf_file, schema_uri):
    """
    Validate an ASDF file against the config schema.

    Raises
    ------
    asdf.ValidationError
    """
    schema = asdf.schema.load_schema(schema_uri)
    tagged_tree = asdf.yamlutil.custom_tree_to_tagged_tree(asdf_file.tree, asdf_file)
    asdf.schema.validate(tagged_tree, asdf_file, schema)

"""sparqlgen: pointer-generator SPARQL query building with execution-based
evaluation, beam re-ranking and an error taxonomy."""

__version__ = "0.1.0"

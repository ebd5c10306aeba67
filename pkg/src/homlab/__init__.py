"""homlab: a desk-scale laboratory for quantitative periodic homogenization.

Submodules
    coeff        periodic coefficient tensors and ellipticity certificates
    cell         corrector / effective-tensor / flux solves on the unit torus
    fem          domain meshes, variable-coefficient solvers, eigensolves, norms
    twoscale     smoothing operator, cutoffs, two-scale expansions, boundary correctors
    experiments  epsilon-sweep harness with fitted convergence slopes
    gridfile     binary grid-file, CSV and SVG artifact writers
    cli          JSON-config command-line front end
"""

__version__ = "0.1.0"

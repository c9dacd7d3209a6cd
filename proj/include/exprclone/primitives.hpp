#pragma once

#include <exprclone/mesh.hpp>

namespace exprclone {

/// Unit icosphere; subdivision s gives 10 * 4^s + 2 vertices.
Mesh make_icosphere(int subdivision);

/// Regular grid in the z = 0 plane over [0, width] x [0, height], CCW faces.
Mesh make_grid(int nx, int ny, double width = 1.0, double height = 1.0);

} // namespace exprclone

#pragma once

// 3D morphable models: S = T + C * alpha over a fixed mesh topology.
//
// Flattened layout everywhere is vertex-interleaved: (x0, y0, z0, x1, y1, z1, ...),
// so component matrices are 3N x K and row 3*i + j is coordinate j of vertex i.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "evmorph/binary_io.hpp"
#include "evmorph/error.hpp"

namespace evmorph {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Full-resolution FLAME topology; tests use much smaller meshes.
inline constexpr int kFlameVertexCount = 5023;

struct Mesh {
    Eigen::MatrixX3d vertices;

    Mesh() = default;
    explicit Mesh(Eigen::MatrixX3d v) : vertices(std::move(v)) {}

    Eigen::Index size() const { return vertices.rows(); }

    Vector flatten() const {
        Vector out(3 * vertices.rows());
        for (Eigen::Index i = 0; i < vertices.rows(); ++i) out.segment<3>(3 * i) = vertices.row(i).transpose();
        return out;
    }

    static Mesh unflatten(const Vector& flat) {
        if (flat.size() % 3 != 0) throw ShapeError("flattened mesh length must be a multiple of 3");
        Eigen::MatrixX3d v(flat.size() / 3, 3);
        for (Eigen::Index i = 0; i < v.rows(); ++i) v.row(i) = flat.segment<3>(3 * i).transpose();
        return Mesh(std::move(v));
    }
};

enum class ModelKind : std::uint32_t { Identity = 0, ActionUnit = 1 };

struct MorphableModel {
    Mesh mean;          // template T
    Matrix components;  // 3N x K
    ModelKind kind = ModelKind::Identity;

    Eigen::Index vertex_count() const { return mean.size(); }
    Eigen::Index component_count() const { return components.cols(); }
};

/// S = T + reshape(C * alpha).
inline Mesh synthesize(const MorphableModel& model, const Vector& alpha) {
    if (alpha.size() != model.component_count()) {
        throw InvalidArgument("alpha has " + std::to_string(alpha.size()) + " entries, model has " +
                              std::to_string(model.component_count()) + " components");
    }
    return Mesh::unflatten(model.mean.flatten() + model.components * alpha);
}

struct IdentityPca {
    MorphableModel model;
    Vector variances;  // explained variance per retained component, non-increasing
};

/// PCA over neutral, pre-registered meshes. Template is the mean mesh; components are the
/// leading left singular vectors of the centered data, each flipped so that its
/// largest-magnitude entry is positive.
inline IdentityPca build_identity_pca(const std::vector<Mesh>& neutral_meshes, int num_components) {
    if (neutral_meshes.size() < 2) throw InvalidArgument("identity PCA needs at least two meshes");
    const auto n_vertices = neutral_meshes.front().size();
    for (const auto& m : neutral_meshes) {
        if (m.size() != n_vertices) throw TopologyError("identity meshes do not share a vertex count");
    }
    const auto n_samples = static_cast<Eigen::Index>(neutral_meshes.size());
    if (num_components < 1 || num_components > n_samples - 1) {
        throw InvalidArgument("component count must be in [1, meshes - 1] = [1, " + std::to_string(n_samples - 1) +
                              "], got " + std::to_string(num_components));
    }

    Matrix data(3 * n_vertices, n_samples);
    for (Eigen::Index s = 0; s < n_samples; ++s) data.col(s) = neutral_meshes[static_cast<std::size_t>(s)].flatten();
    const Vector mean = data.rowwise().mean();
    data.colwise() -= mean;

    Eigen::BDCSVD<Matrix> svd(data, Eigen::ComputeThinU);
    Matrix components = svd.matrixU().leftCols(num_components);
    for (Eigen::Index k = 0; k < components.cols(); ++k) {
        Eigen::Index arg = 0;
        components.col(k).cwiseAbs().maxCoeff(&arg);
        if (components(arg, k) < 0) components.col(k) *= -1.0;
    }
    Vector variances = svd.singularValues().head(num_components).array().square() / static_cast<double>(n_samples - 1);

    IdentityPca out;
    out.model.mean = Mesh::unflatten(mean);
    out.model.components = std::move(components);
    out.model.kind = ModelKind::Identity;
    out.variances = std::move(variances);
    return out;
}

inline MorphableModel build_identity_model(const std::vector<Mesh>& neutral_meshes, int num_components) {
    return build_identity_pca(neutral_meshes, num_components).model;
}

struct OffsetSet {
    std::vector<Vector> offsets;  // each 3N
    std::vector<std::string> labels;
};

struct ExpressionPair {
    Mesh expressive;
    Mesh neutral;
    std::string au_label;
};

/// Expressive minus neutral scan of the same actor, which strips the identity part.
inline OffsetSet compute_au_offsets(const std::vector<ExpressionPair>& pairs) {
    OffsetSet out;
    for (const auto& p : pairs) {
        if (p.expressive.size() != p.neutral.size()) {
            throw TopologyError("expressive/neutral pair '" + p.au_label + "' has mismatched vertex counts");
        }
        if (!out.offsets.empty() && out.offsets.front().size() != 3 * p.neutral.size()) {
            throw TopologyError("offset pairs do not share a topology");
        }
        out.offsets.push_back(p.expressive.flatten() - p.neutral.flatten());
        out.labels.push_back(p.au_label);
    }
    return out;
}

struct DictionaryOptions {
    int num_atoms = 32;
    int sparsity = 3;
    int iterations = 20;
    std::uint64_t seed = 0;
};

struct DictionaryResult {
    MorphableModel model;
    Matrix codes;                  // K x M sparse coefficients of the training offsets
    std::vector<double> residual;  // [0] after the initial coding, [i] after round i
};

namespace detail {

struct SparseCode {
    std::vector<Eigen::Index> support;
    Vector coeffs;
    double residual = 0.0;
};

inline SparseCode least_squares_on_support(const Matrix& dict, const Vector& x, std::vector<Eigen::Index> support) {
    SparseCode code;
    code.support = std::move(support);
    if (code.support.empty()) {
        code.residual = x.squaredNorm();
        return code;
    }
    Matrix sub(dict.rows(), static_cast<Eigen::Index>(code.support.size()));
    for (std::size_t i = 0; i < code.support.size(); ++i) sub.col(static_cast<Eigen::Index>(i)) = dict.col(code.support[i]);
    code.coeffs = sub.colPivHouseholderQr().solve(x);
    code.residual = (x - sub * code.coeffs).squaredNorm();
    return code;
}

/// Orthogonal matching pursuit with a fixed number of atoms.
inline SparseCode omp(const Matrix& dict, const Vector& x, int sparsity) {
    std::vector<Eigen::Index> support;
    Vector residual = x;
    SparseCode code;
    code.residual = x.squaredNorm();
    const double stop = 1e-28 * std::max(1.0, x.squaredNorm());
    for (int s = 0; s < sparsity && code.residual > stop; ++s) {
        Vector corr = dict.transpose() * residual;
        for (auto j : support) corr(j) = 0.0;
        Eigen::Index best = 0;
        corr.cwiseAbs().maxCoeff(&best);
        if (std::find(support.begin(), support.end(), best) != support.end()) break;
        support.push_back(best);
        code = least_squares_on_support(dict, x, support);
        Matrix sub(dict.rows(), static_cast<Eigen::Index>(support.size()));
        for (std::size_t i = 0; i < support.size(); ++i) sub.col(static_cast<Eigen::Index>(i)) = dict.col(support[i]);
        residual = x - sub * code.coeffs;
    }
    return code;
}

inline double total_residual(const Matrix& data, const Matrix& dict, const Matrix& codes) {
    return (data - dict * codes).squaredNorm();
}

}  // namespace detail

/// Learns a unit-norm deformation dictionary from AU offsets.
///
/// Alternates sparse coding (OMP at fixed sparsity) with the method-of-optimal-directions
/// update D = X A^T (A A^T)^+, then renormalizes atoms and rescales codes. The coding
/// step keeps a signal's previous support when re-solving it on the new dictionary
/// beats the fresh OMP pick, and a round whose residual would rise through rounding is
/// discarded, so the recorded residual is non-increasing.
/// Initialization takes the first K nonzero offsets of a seeded shuffle, normalized.
/// Offsets are used as given (no centering).
inline DictionaryResult learn_au_dictionary(const OffsetSet& offsets, const Mesh& base, const DictionaryOptions& opt) {
    const int K = opt.num_atoms;
    if (K < 1) throw InvalidArgument("dictionary needs at least one atom");
    if (opt.sparsity < 1 || opt.sparsity > K) throw InvalidArgument("sparsity must be in [1, K]");
    if (opt.iterations < 0) throw InvalidArgument("iteration count must be non-negative");
    if (offsets.offsets.size() < static_cast<std::size_t>(K)) {
        throw InvalidArgument("need at least K offsets to learn K atoms");
    }
    const auto dim = offsets.offsets.front().size();
    if (dim != 3 * base.size()) throw TopologyError("base mesh does not match the offset topology");
    const auto M = static_cast<Eigen::Index>(offsets.offsets.size());
    Matrix data(dim, M);
    for (Eigen::Index m = 0; m < M; ++m) {
        if (offsets.offsets[static_cast<std::size_t>(m)].size() != dim) throw TopologyError("offsets do not share a topology");
        data.col(m) = offsets.offsets[static_cast<std::size_t>(m)];
    }
    const double scale = data.cwiseAbs().maxCoeff();
    if (!(scale > 0.0)) throw DegenerateDataError("all AU offsets are zero");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(M));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 rng(opt.seed);
    std::shuffle(order.begin(), order.end(), rng);

    Matrix dict(dim, K);
    int filled = 0;
    for (auto m : order) {
        if (filled == K) break;
        const double n = data.col(m).norm();
        if (n <= 1e-12 * scale) continue;
        dict.col(filled++) = data.col(m) / n;
    }
    if (filled < K) throw DegenerateDataError("fewer than K nonzero AU offsets");

    std::vector<detail::SparseCode> codes(static_cast<std::size_t>(M));
    Matrix code_matrix = Matrix::Zero(K, M);
    auto assemble = [&] {
        code_matrix.setZero();
        for (Eigen::Index m = 0; m < M; ++m) {
            const auto& c = codes[static_cast<std::size_t>(m)];
            for (std::size_t i = 0; i < c.support.size(); ++i) code_matrix(c.support[i], m) = c.coeffs(static_cast<Eigen::Index>(i));
        }
    };
    auto code_all = [&](bool keep_previous) {
        for (Eigen::Index m = 0; m < M; ++m) {
            auto fresh = detail::omp(dict, data.col(m), opt.sparsity);
            auto& prev = codes[static_cast<std::size_t>(m)];
            if (keep_previous && !prev.support.empty()) {
                auto refit = detail::least_squares_on_support(dict, data.col(m), prev.support);
                if (refit.residual < fresh.residual) {
                    prev = std::move(refit);
                    continue;
                }
            }
            prev = std::move(fresh);
        }
        assemble();
    };

    DictionaryResult result;
    code_all(false);
    result.residual.push_back(detail::total_residual(data, dict, code_matrix));

    for (int it = 0; it < opt.iterations; ++it) {
        const Matrix prev_dict = dict;
        const auto prev_codes = codes;
        const Matrix prev_code_matrix = code_matrix;
        code_all(true);

        const Matrix gram = code_matrix * code_matrix.transpose();
        Matrix updated = (data * code_matrix.transpose()) * gram.completeOrthogonalDecomposition().pseudoInverse();
        std::vector<bool> used(static_cast<std::size_t>(K), false);
        for (Eigen::Index k = 0; k < K; ++k) used[static_cast<std::size_t>(k)] = code_matrix.row(k).squaredNorm() > 0.0;

        // renormalize and push the scale into the codes, so D * A is unchanged
        for (Eigen::Index k = 0; k < K; ++k) {
            const double n = updated.col(k).norm();
            if (!used[static_cast<std::size_t>(k)] || n <= 1e-300) {
                updated.col(k) = dict.col(k);
                continue;
            }
            updated.col(k) /= n;
            code_matrix.row(k) *= n;
        }
        dict = std::move(updated);
        for (Eigen::Index m = 0; m < M; ++m) {
            auto& c = codes[static_cast<std::size_t>(m)];
            for (std::size_t i = 0; i < c.support.size(); ++i) c.coeffs(static_cast<Eigen::Index>(i)) = code_matrix(c.support[i], m);
        }
        const Matrix residual = data - dict * code_matrix;
        // A round that ends worse (only possible through rounding) is discarded.
        if (residual.squaredNorm() > result.residual.back()) {
            dict = prev_dict;
            codes = prev_codes;
            code_matrix = prev_code_matrix;
            result.residual.push_back(result.residual.back());
            continue;
        }
        result.residual.push_back(residual.squaredNorm());

        // unused atoms do not affect the current residual; point them at the worst-fit signal
        for (Eigen::Index k = 0; k < K; ++k) {
            if (used[static_cast<std::size_t>(k)]) continue;
            Eigen::Index worst = 0;
            const double worst_res = residual.colwise().squaredNorm().maxCoeff(&worst);
            if (worst_res <= 1e-24 * scale * scale) break;
            dict.col(k) = residual.col(worst) / std::sqrt(worst_res);
            used[static_cast<std::size_t>(k)] = true;
        }
    }

    result.model.mean = base;
    result.model.components = std::move(dict);
    result.model.kind = ModelKind::ActionUnit;
    result.codes = std::move(code_matrix);
    return result;
}

/// Landmark-restricted view of a model: selected rows of T and C, in the given order.
struct LandmarkModel {
    Eigen::MatrixX3d mean;  // L x 3
    Matrix components;      // 3L x K
};

inline LandmarkModel restrict_to_landmarks(const MorphableModel& model, const std::vector<int>& landmark_vertex_ids) {
    const auto n = model.vertex_count();
    const auto L = static_cast<Eigen::Index>(landmark_vertex_ids.size());
    LandmarkModel out;
    out.mean.resize(L, 3);
    out.components.resize(3 * L, model.component_count());
    for (Eigen::Index i = 0; i < L; ++i) {
        const int id = landmark_vertex_ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= n) {
            throw BoundsError("landmark vertex id " + std::to_string(id) + " outside [0, " + std::to_string(n) + ")");
        }
        out.mean.row(i) = model.mean.vertices.row(id);
        out.components.middleRows(3 * i, 3) = model.components.middleRows(3 * static_cast<Eigen::Index>(id), 3);
    }
    return out;
}

inline Eigen::MatrixX3d restrict_mesh(const Mesh& mesh, const std::vector<int>& landmark_vertex_ids) {
    Eigen::MatrixX3d out(static_cast<Eigen::Index>(landmark_vertex_ids.size()), 3);
    for (std::size_t i = 0; i < landmark_vertex_ids.size(); ++i) {
        const int id = landmark_vertex_ids[i];
        if (id < 0 || id >= mesh.size()) throw BoundsError("landmark vertex id " + std::to_string(id) + " out of range");
        out.row(static_cast<Eigen::Index>(i)) = mesh.vertices.row(id);
    }
    return out;
}

// Model file ("M3DM"): u32 N, u32 K, u32 kind (0 identity, 1 AU), then the N x 3
// template row by row, then the 3N x K components column by column; f64 little-endian.

inline void save_model(const MorphableModel& model, std::ostream& out) {
    io::write_magic(out, "M3DM");
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.vertex_count()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.component_count()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.kind));
    for (Eigen::Index i = 0; i < model.vertex_count(); ++i)
        for (int j = 0; j < 3; ++j) io::write_le<double>(out, model.mean.vertices(i, j));
    for (Eigen::Index k = 0; k < model.component_count(); ++k)
        for (Eigen::Index r = 0; r < model.components.rows(); ++r) io::write_le<double>(out, model.components(r, k));
}

inline void save_model(const MorphableModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write model file " + path.string());
    save_model(model, out);
}

inline MorphableModel load_model(std::istream& in) {
    io::expect_magic(in, "M3DM");
    const auto n = io::read_le<std::uint32_t>(in, "vertex count");
    const auto k = io::read_le<std::uint32_t>(in, "component count");
    const auto kind = io::read_le<std::uint32_t>(in, "kind");
    if (kind > 1) throw ParseError("unknown model kind " + std::to_string(kind), 12);
    MorphableModel model;
    model.kind = static_cast<ModelKind>(kind);
    model.mean.vertices.resize(n, 3);
    for (std::uint32_t i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) model.mean.vertices(i, j) = io::read_le<double>(in, "template");
    model.components.resize(3 * static_cast<Eigen::Index>(n), k);
    for (std::uint32_t c = 0; c < k; ++c)
        for (Eigen::Index r = 0; r < model.components.rows(); ++r) model.components(r, c) = io::read_le<double>(in, "components");
    return model;
}

inline MorphableModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open model file " + path.string());
    return load_model(in);
}

/// Vertices only; faces and other records are ignored.
inline Mesh load_mesh_obj(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open mesh " + path.string());
    std::vector<Eigen::RowVector3d> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.size() < 2 || line[0] != 'v' || (line[1] != ' ' && line[1] != '\t')) continue;
        std::istringstream ss(line.substr(2));
        Eigen::RowVector3d v;
        if (!(ss >> v(0) >> v(1) >> v(2))) throw ParseError("malformed vertex line in " + path.string(), line_no);
        rows.push_back(v);
    }
    Eigen::MatrixX3d verts(static_cast<Eigen::Index>(rows.size()), 3);
    for (std::size_t i = 0; i < rows.size(); ++i) verts.row(static_cast<Eigen::Index>(i)) = rows[i];
    return Mesh(std::move(verts));
}

/// One `x,y,z` row per vertex.
inline Mesh load_mesh_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open mesh " + path.string());
    std::vector<Eigen::RowVector3d> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        Eigen::RowVector3d v;
        std::string extra;
        if (!(ss >> v(0) >> v(1) >> v(2)) || (ss >> extra)) throw ParseError("expected 'x,y,z' in " + path.string(), line_no);
        rows.push_back(v);
    }
    Eigen::MatrixX3d verts(static_cast<Eigen::Index>(rows.size()), 3);
    for (std::size_t i = 0; i < rows.size(); ++i) verts.row(static_cast<Eigen::Index>(i)) = rows[i];
    return Mesh(std::move(verts));
}

inline Mesh load_mesh(const std::filesystem::path& path) {
    return path.extension() == ".obj" ? load_mesh_obj(path) : load_mesh_csv(path);
}

inline void save_mesh_obj(const Mesh& mesh, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write mesh " + path.string());
    out.precision(17);
    for (Eigen::Index i = 0; i < mesh.size(); ++i)
        out << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2) << '\n';
}

/// One integer vertex id per line.
inline std::vector<int> load_landmark_ids(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open landmark id file " + path.string());
    std::vector<int> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ss(line);
        int id = 0;
        std::string extra;
        if (!(ss >> id) || (ss >> extra)) throw ParseError("expected one integer per line", line_no);
        ids.push_back(id);
    }
    return ids;
}

inline void save_landmark_ids(const std::vector<int>& ids, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write landmark id file " + path.string());
    for (int id : ids) out << id << '\n';
}

}  // namespace evmorph

#pragma once

// Landmark-based two-step 3DMM fitting: orthographic camera by pseudo-inverse, then
// closed-form ridge regression of the 2D landmark residual on camera-projected
// components. Identity first (frame 0, neutral), then AU coefficients per frame
// around the identity shape.

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "evmorph/error.hpp"
#include "evmorph/face3d.hpp"

namespace evmorph {

inline constexpr int kNumLandmarks = 68;
// outer eye corners in the 68-point annotation scheme
inline constexpr int kLeftEyeOuter = 36;
inline constexpr int kRightEyeOuter = 45;

/// 68 detected landmarks; x, y in pixels plus the detector's approximate z.
struct Landmarks3D {
    Eigen::MatrixX3d points;

    Landmarks3D() : points(Eigen::MatrixX3d::Zero(kNumLandmarks, 3)) {}
    explicit Landmarks3D(Eigen::MatrixX3d p) : points(std::move(p)) {
        if (points.rows() != kNumLandmarks) {
            throw ShapeError("expected 68 landmarks, got " + std::to_string(points.rows()));
        }
        if (!points.allFinite()) throw InvalidArgument("landmarks must be finite");
    }

    Eigen::MatrixX2d xy() const { return points.leftCols<2>(); }
};

/// Orthographic camera: p -> A p + t.
struct CameraModel {
    Eigen::Matrix<double, 2, 3> A = Eigen::Matrix<double, 2, 3>::Zero();
    Eigen::Vector2d t = Eigen::Vector2d::Zero();
};

struct FitConfig {
    double lambda_reg = 0.05;
    /// Divide residuals by the outer-eye-corner distance so lambda is resolution independent.
    /// Only applies to 68-point inputs.
    bool normalize_scale = true;
    /// Extra camera/coefficient alternations after the initial camera estimate.
    /// 0 reproduces the single-pass procedure (camera from the base shape, then alpha).
    int camera_refinements = 50;
    /// Alternation stops once alpha moves less than this (relative).
    double refinement_tolerance = 1e-12;

    std::vector<std::string> validate() const {
        std::vector<std::string> errors;
        if (!(lambda_reg >= 0.0) || !std::isfinite(lambda_reg)) errors.emplace_back("fit.lambda must be a finite value >= 0");
        if (camera_refinements < 0) errors.emplace_back("fit.camera_refinements must be >= 0");
        if (!(refinement_tolerance >= 0.0)) errors.emplace_back("fit.refinement_tolerance must be >= 0");
        return errors;
    }
};

struct FitResult {
    Vector alpha;
    CameraModel camera;
    double residual = 0.0;  // mean squared reprojection error per 2D coordinate, pixels^2
};

/// Rows are points; returns points * A^T + t.
inline Eigen::MatrixX2d project(const CameraModel& camera, const Eigen::MatrixX3d& points) {
    Eigen::MatrixX2d out = points * camera.A.transpose();
    out.rowwise() += camera.t.transpose();
    return out;
}

/// Least-squares orthographic camera from 2D/3D correspondences.
///
/// Both point sets are centered so that the translation does not leak into A; then
/// A = l^T pinv(L^T) on the centered sets and t = mean(l) - A mean(L), which equals
/// the row-mean of l - A L.
inline CameraModel estimate_camera(const Eigen::MatrixX2d& l2d, const Eigen::MatrixX3d& model_points) {
    if (l2d.rows() != model_points.rows()) throw ShapeError("landmark and model point counts differ");
    if (l2d.rows() < 4) throw SingularError("camera estimation needs at least 4 points");
    if (!l2d.allFinite()) throw InvalidArgument("landmarks must be finite");
    const Eigen::RowVector2d l_mean = l2d.colwise().mean();
    const Eigen::RowVector3d m_mean = model_points.colwise().mean();
    const Eigen::MatrixX2d lc = l2d.rowwise() - l_mean;
    const Eigen::MatrixX3d mc = model_points.rowwise() - m_mean;

    Eigen::JacobiSVD<Matrix> svd(Matrix(mc), Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::Vector3d s = svd.singularValues();
    if (!(s(2) > 1e-10 * s(0))) throw SingularError("template landmarks are rank deficient after centering");
    const Eigen::Matrix3Xd pinv = svd.matrixV() * s.cwiseInverse().asDiagonal() * svd.matrixU().transpose();

    CameraModel cam;
    cam.A = (pinv * lc).transpose();
    cam.t = (l_mean - m_mean * cam.A.transpose()).transpose();
    return cam;
}

/// Projects 3D landmark components (3L x K) through A: (2L x K), x/y interleaved per landmark.
inline Matrix project_components(const Eigen::Matrix<double, 2, 3>& A, const Matrix& components3d) {
    const Eigen::Index L = components3d.rows() / 3;
    Matrix out(2 * L, components3d.cols());
    for (Eigen::Index i = 0; i < L; ++i) out.middleRows(2 * i, 2) = A * components3d.middleRows(3 * i, 3);
    return out;
}

inline Vector interleave(const Eigen::MatrixX2d& points) {
    Vector out(2 * points.rows());
    for (Eigen::Index i = 0; i < points.rows(); ++i) out.segment<2>(2 * i) = points.row(i).transpose();
    return out;
}

/// Residual scale: outer-eye-corner distance of the targets (68 points), 1 otherwise.
inline double landmark_scale(const Eigen::MatrixX2d& l2d, const FitConfig& config) {
    if (!config.normalize_scale || l2d.rows() != kNumLandmarks) return 1.0;
    const double d = (l2d.row(kLeftEyeOuter) - l2d.row(kRightEyeOuter)).norm();
    if (!(d > 1e-9)) throw DegenerateDataError("eye corners coincide; cannot normalize landmark scale");
    return d;
}

/// Closed-form ridge solution of min ||dl - P a||^2 + lambda ||a||^2 for a fixed camera.
///
/// dl = vec(l2d - project(camera, base)) and P = A applied to every 3D component; the
/// translation cancels. Both are divided by the landmark scale before solving.
inline FitResult fit_coefficients(const Eigen::MatrixX2d& l2d, const Eigen::MatrixX3d& base,
                                  const Matrix& components3d, const CameraModel& camera, const FitConfig& config) {
    const Eigen::Index K = components3d.cols();
    if (K < 1) throw InvalidArgument("need at least one component");
    if (components3d.rows() != 3 * base.rows() || l2d.rows() != base.rows()) {
        throw ShapeError("landmark, base and component sizes disagree");
    }
    if (!(config.lambda_reg >= 0.0)) throw InvalidArgument("lambda must be non-negative");

    const double scale = landmark_scale(l2d, config);
    const Vector dl = interleave(l2d - project(camera, base));
    const Matrix P = project_components(camera.A, components3d);
    const Vector dl_n = dl / scale;
    const Matrix P_n = P / scale;

    Matrix normal = P_n.transpose() * P_n;
    const Vector rhs = P_n.transpose() * dl_n;
    FitResult out;
    out.camera = camera;
    if (config.lambda_reg == 0.0) {
        Eigen::ColPivHouseholderQR<Matrix> qr(P_n);
        qr.setThreshold(1e-12);
        if (qr.rank() < K) throw SingularError("projected components are rank deficient and lambda is 0");
        out.alpha = normal.ldlt().solve(rhs);
    } else {
        normal.diagonal().array() += config.lambda_reg;
        out.alpha = normal.llt().solve(rhs);
    }
    out.residual = (dl - P * out.alpha).squaredNorm() / static_cast<double>(dl.size());
    return out;
}

/// Camera estimation followed by coefficient fitting, alternated `camera_refinements`
/// times: each camera is re-estimated against the currently deformed shape.
inline FitResult fit_with_camera(const Eigen::MatrixX2d& l2d, const Eigen::MatrixX3d& base, const Matrix& components3d,
                                 const FitConfig& config) {
    FitResult fit = fit_coefficients(l2d, base, components3d, estimate_camera(l2d, base), config);
    for (int r = 0; r < config.camera_refinements; ++r) {
        Eigen::MatrixX3d deformed = base;
        const Vector offset = components3d * fit.alpha;
        for (Eigen::Index i = 0; i < deformed.rows(); ++i) deformed.row(i) += offset.segment<3>(3 * i).transpose();
        FitResult next = fit_coefficients(l2d, base, components3d, estimate_camera(l2d, deformed), config);
        const double step = (next.alpha - fit.alpha).norm();
        const double ref = std::max(next.alpha.norm(), 1e-300);
        fit = std::move(next);
        if (step <= config.refinement_tolerance * ref) break;
    }
    return fit;
}

struct IdentityFit {
    Vector alpha;
    Mesh shape;  // S_I = T + C_I alpha_I on the full mesh
    CameraModel camera;
    double residual = 0.0;
};

/// First step: identity coefficients from the neutral first frame.
inline IdentityFit fit_identity(const Landmarks3D& first_frame, const MorphableModel& id_model,
                                const std::vector<int>& landmark_ids, const FitConfig& config) {
    if (id_model.kind != ModelKind::Identity) throw InvalidArgument("fit_identity needs an identity model");
    const LandmarkModel lm = restrict_to_landmarks(id_model, landmark_ids);
    const FitResult fit = fit_with_camera(first_frame.xy(), lm.mean, lm.components, config);
    return IdentityFit{fit.alpha, synthesize(id_model, fit.alpha), fit.camera, fit.residual};
}

/// Second step: per-frame AU coefficients with S_I in place of the template. The camera is
/// re-estimated every frame since the head moves. Frames are independent, so `threads`
/// only changes wall time.
inline std::vector<FitResult> fit_au_sequence_detailed(const std::vector<Landmarks3D>& landmark_seq,
                                                       const Mesh& identity_shape, const MorphableModel& au_model,
                                                       const std::vector<int>& landmark_ids, const FitConfig& config,
                                                       unsigned threads = 1) {
    if (au_model.kind != ModelKind::ActionUnit) throw InvalidArgument("fit_au_sequence needs an AU model");
    if (landmark_seq.empty()) throw InvalidArgument("landmark sequence is empty");
    if (identity_shape.size() != au_model.vertex_count()) throw TopologyError("identity shape does not match AU model");
    const LandmarkModel lm = restrict_to_landmarks(au_model, landmark_ids);
    const Eigen::MatrixX3d base = restrict_mesh(identity_shape, landmark_ids);

    std::vector<FitResult> out(landmark_seq.size());
    auto run = [&](std::size_t first, std::size_t last) {
        for (std::size_t f = first; f < last; ++f) out[f] = fit_with_camera(landmark_seq[f].xy(), base, lm.components, config);
    };
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(landmark_seq.size())));
    if (threads == 1) {
        run(0, landmark_seq.size());
        return out;
    }
    std::vector<std::thread> workers;
    const std::size_t chunk = (landmark_seq.size() + threads - 1) / threads;
    for (unsigned w = 0; w < threads; ++w) {
        const std::size_t first = w * chunk;
        const std::size_t last = std::min(landmark_seq.size(), first + chunk);
        if (first < last) workers.emplace_back(run, first, last);
    }
    for (auto& t : workers) t.join();
    return out;
}

/// One row of AU coefficients per frame.
using AlphaSequence = Matrix;

inline AlphaSequence fit_au_sequence(const std::vector<Landmarks3D>& landmark_seq, const Mesh& identity_shape,
                                     const MorphableModel& au_model, const std::vector<int>& landmark_ids,
                                     const FitConfig& config, unsigned threads = 1) {
    const auto fits = fit_au_sequence_detailed(landmark_seq, identity_shape, au_model, landmark_ids, config, threads);
    AlphaSequence out(static_cast<Eigen::Index>(fits.size()), au_model.component_count());
    for (std::size_t f = 0; f < fits.size(); ++f) out.row(static_cast<Eigen::Index>(f)) = fits[f].alpha.transpose();
    return out;
}

// Text formats: one line per frame, comma-separated, full double precision.

namespace detail {

inline std::vector<std::vector<double>> read_csv_rows(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(field, &used));
                if (field.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(field);
            } catch (const std::exception&) {
                throw ParseError("bad number '" + field + "' in " + path.string(), line_no);
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_csv_row(std::ostream& out, const double* values, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
        if (i) out << ',';
        out << values[i];
    }
    out << '\n';
}

}  // namespace detail

inline std::vector<Landmarks3D> load_landmark_sequence(const std::filesystem::path& path) {
    const auto rows = detail::read_csv_rows(path);
    std::vector<Landmarks3D> out;
    for (std::size_t f = 0; f < rows.size(); ++f) {
        if (rows[f].size() != 3 * kNumLandmarks) {
            throw ParseError("expected 204 values per frame, got " + std::to_string(rows[f].size()), f + 1);
        }
        Eigen::MatrixX3d p(kNumLandmarks, 3);
        for (int i = 0; i < kNumLandmarks; ++i)
            for (int j = 0; j < 3; ++j) p(i, j) = rows[f][static_cast<std::size_t>(3 * i + j)];
        out.emplace_back(std::move(p));
    }
    return out;
}

inline void save_landmark_sequence(const std::vector<Landmarks3D>& seq, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    out.precision(17);
    for (const auto& l : seq) {
        const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> rm = l.points;
        detail::write_csv_row(out, rm.data(), rm.size());
    }
}

inline AlphaSequence load_alpha_sequence(const std::filesystem::path& path) {
    const auto rows = detail::read_csv_rows(path);
    if (rows.empty()) return AlphaSequence(0, 0);
    AlphaSequence out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t f = 0; f < rows.size(); ++f) {
        if (rows[f].size() != rows.front().size()) throw ParseError("alpha rows differ in length", f + 1);
        for (std::size_t k = 0; k < rows[f].size(); ++k) out(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(k)) = rows[f][k];
    }
    return out;
}

inline void save_alpha_sequence(const AlphaSequence& alphas, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    out.precision(17);
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = alphas;
    for (Eigen::Index f = 0; f < rm.rows(); ++f) detail::write_csv_row(out, rm.row(f).data(), rm.cols());
}

}  // namespace evmorph

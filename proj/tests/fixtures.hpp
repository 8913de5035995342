#pragma once

// Random scenes shared by the fitting tests and the acceptance suite.

#include <numeric>
#include <random>

#include "evmorph.hpp"

namespace fixture {

using evmorph::Matrix;
using evmorph::Vector;

inline Eigen::MatrixX3d random_points(std::mt19937_64& rng, int n) {
    std::normal_distribution<double> d;
    Eigen::MatrixX3d p(n, 3);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = d(rng);
    return p;
}

inline Matrix random_components(std::mt19937_64& rng, int n, int k, double scale = 0.1) {
    std::normal_distribution<double> d;
    Matrix c(3 * n, k);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = scale * d(rng);
    return c;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index k, double sigma = 1.0) {
    std::normal_distribution<double> d(0.0, sigma);
    Vector a(k);
    for (auto& x : a) x = d(rng);
    return a;
}

inline evmorph::Landmarks3D render(const evmorph::CameraModel& cam, const Eigen::MatrixX3d& pts) {
    Eigen::MatrixX3d l(pts.rows(), 3);
    l.leftCols<2>() = evmorph::project(cam, pts);
    l.col(2) = pts.col(2);
    return evmorph::Landmarks3D(l);
}

inline Eigen::MatrixX3d deform(const Eigen::MatrixX3d& base, const Matrix& comps, const Vector& a) {
    Eigen::MatrixX3d out = base;
    const Vector d = comps * a;
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) += d.segment<3>(3 * i).transpose();
    return out;
}

struct Scene {
    evmorph::MorphableModel id_model;
    evmorph::MorphableModel au_model;
    std::vector<int> ids;
};

/// Gaussian template and components; AU columns unit norm; 68 random landmark vertices.
inline Scene make_scene(std::mt19937_64& rng, int n = 100, int k_id = 6, int k_au = 8) {
    Scene s;
    const evmorph::Mesh tmpl(random_points(rng, n));
    Matrix cid = random_components(rng, n, k_id);
    s.id_model = {tmpl, cid, evmorph::ModelKind::Identity};
    Matrix cau = random_components(rng, n, k_au);
    cau.colwise().normalize();
    s.au_model = {tmpl, cau, evmorph::ModelKind::ActionUnit};
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    s.ids.assign(all.begin(), all.begin() + evmorph::kNumLandmarks);
    return s;
}

}  // namespace fixture

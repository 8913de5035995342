#pragma once

// Synthetic ground truth for every pipeline stage: a random face-like template with
// localized AU components and smooth identity components, planted AU activation
// trajectories, landmarks rendered through a known orthographic camera, and event
// streams generated from landmark motion.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "evmorph/error.hpp"
#include "evmorph/events.hpp"
#include "evmorph/face3d.hpp"
#include "evmorph/fitting.hpp"
#include "evmorph/training.hpp"

namespace evmorph {

struct SynthSpec {
    int n_classes = 4;
    int n_videos_per_class = 25;
    int seq_len = 16;
    int K = 32;                 // AU components
    int id_components = 8;
    int mesh_size = 100;        // vertices N
    double noise_sigma = 0.25;  // landmark noise, pixels
    std::uint64_t seed = 0;
    int sensor_size = 64;       // square event sensor, pixels
    int image_size = 32;        // model input; frames are box-resampled to it
    int events_per_frame = 4;   // events per polarity per moved mesh vertex per window
    double test_fraction = 0.2;
    double lambda_reg = 0.05;   // ridge weight for the label fits

    std::vector<std::string> validate() const {
        std::vector<std::string> e;
        if (n_classes < 1) e.emplace_back("synth.n_classes must be >= 1");
        if (n_videos_per_class < 1) e.emplace_back("synth.n_videos_per_class must be >= 1");
        if (seq_len < 1) e.emplace_back("synth.seq_len must be >= 1");
        if (K < 1) e.emplace_back("synth.K must be >= 1");
        if (n_classes > K) e.emplace_back("synth.n_classes must not exceed synth.K (one component per class)");
        if (id_components < 1) e.emplace_back("synth.id_components must be >= 1");
        if (mesh_size < kNumLandmarks) e.emplace_back("synth.mesh_size must be >= 68");
        if (!(noise_sigma >= 0.0)) e.emplace_back("synth.noise_sigma must be >= 0");
        if (sensor_size < 8) e.emplace_back("synth.sensor_size must be >= 8");
        if (image_size < 1) e.emplace_back("synth.image_size must be >= 1");
        if (events_per_frame < 1) e.emplace_back("synth.events_per_frame must be >= 1");
        if (!(test_fraction >= 0.0 && test_fraction < 1.0)) e.emplace_back("synth.test_fraction must be in [0, 1)");
        if (!(lambda_reg >= 0.0)) e.emplace_back("synth.lambda must be >= 0");
        return e;
    }
};

/// SplitMix64 step; derives independent per-video / per-stage seeds from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

// ---- meshes and models -------------------------------------------------------------

/// Front half of an ellipsoid (x half-width 1, y half-height 1.3, depth 0.7) sampled by a
/// Fibonacci lattice, with a seeded smooth bump field on z.
inline Mesh make_synthetic_template(int n_vertices, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double phase_a = 2.0 * std::numbers::pi * uniform01(rng);
    const double phase_b = 2.0 * std::numbers::pi * uniform01(rng);
    Eigen::MatrixX3d v(n_vertices, 3);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n_vertices; ++i) {
        const double z = 1.0 - (i + 0.5) / n_vertices;  // (0, 1): front hemisphere
        const double r = std::sqrt(1.0 - z * z);
        const double theta = golden * i;
        const double x = r * std::cos(theta);
        const double y = r * std::sin(theta);
        v(i, 0) = x;
        v(i, 1) = 1.3 * y;
        v(i, 2) = 0.7 * z + 0.05 * std::sin(2.0 * x + phase_a) * std::cos(1.5 * y + phase_b);
    }
    return Mesh(std::move(v));
}

/// Farthest-point order over the given vertices (x, y only), starting at a seeded pick.
inline std::vector<int> farthest_point_order(const Mesh& mesh, const std::vector<int>& candidates, int count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> out;
    std::vector<double> dist(candidates.size(), std::numeric_limits<double>::infinity());
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng);
    for (int k = 0; k < count; ++k) {
        out.push_back(candidates[pick]);
        const Eigen::RowVector2d c = mesh.vertices.row(candidates[pick]).head<2>();
        for (std::size_t i = 0; i < candidates.size(); ++i)
            dist[i] = std::min(dist[i], (mesh.vertices.row(candidates[i]).head<2>() - c).squaredNorm());
        pick = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
    }
    return out;
}

/// Orthonormalizes columns in order (modified Gram-Schmidt via QR).
inline Matrix orthonormalize(const Matrix& m) {
    Eigen::HouseholderQR<Matrix> qr(m);
    Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
    const Matrix r = qr.matrixQR().topRows(m.cols()).triangularView<Eigen::Upper>();
    for (Eigen::Index k = 0; k < q.cols(); ++k)
        if (r(k, k) < 0) q.col(k) *= -1.0;  // keep each column aligned with its raw direction
    return q;
}

/// Removes from each column the 3-D affine field (p -> M p + b) that best fits it on
/// the `rows` vertices. An orthographic camera absorbs affine deformations, so only
/// the remainder is identifiable from those vertices.
inline Matrix remove_affine_part(const Matrix& fields, const Mesh& mesh, const std::vector<int>& rows) {
    const auto m = static_cast<Eigen::Index>(rows.size());
    Matrix basis = Matrix::Zero(3 * m, 12);
    Matrix sub(3 * m, fields.cols());
    for (Eigen::Index r = 0; r < m; ++r) {
        const auto v = rows[static_cast<std::size_t>(r)];
        for (int d = 0; d < 3; ++d) {
            basis.block<1, 3>(3 * r + d, 4 * d) = mesh.vertices.row(v);
            basis(3 * r + d, 4 * d + 3) = 1.0;
            sub.row(3 * r + d) = fields.row(3 * v + d);
        }
    }
    const Matrix coef = basis.colPivHouseholderQr().solve(sub);
    Matrix out = fields;
    for (Eigen::Index i = 0; i < mesh.size(); ++i) {
        for (int d = 0; d < 3; ++d) {
            Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(12);
            row.segment<3>(4 * d) = mesh.vertices.row(i);
            row(4 * d + 3) = 1.0;
            out.row(3 * i + d) -= row * coef;
        }
    }
    return out;
}

/// Localized patches, one per center: Gaussian falloff (radius 0.3) times a random
/// direction mostly in the image plane; affine part on `landmarks` removed, then
/// orthonormalized.
inline Matrix make_localized_components(const Mesh& mesh, const std::vector<int>& centers, const std::vector<int>& landmarks,
                                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    const auto n = mesh.size();
    Matrix raw = Matrix::Zero(3 * n, static_cast<Eigen::Index>(centers.size()));
    for (std::size_t k = 0; k < centers.size(); ++k) {
        Eigen::Vector3d dir(normal(rng), normal(rng), 0.3 * normal(rng));
        dir.normalize();
        const Eigen::RowVector3d c = mesh.vertices.row(centers[k]);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double w = std::exp(-(mesh.vertices.row(i) - c).squaredNorm() / (2.0 * 0.3 * 0.3));
            raw.block<3, 1>(3 * i, static_cast<Eigen::Index>(k)) = w * dir;
        }
    }
    return orthonormalize(remove_affine_part(raw, mesh, landmarks));
}

/// Smooth displacement fields (sinusoids of the coordinates) with the affine part on
/// `landmarks` removed, orthonormalized.
inline Matrix make_smooth_components(const Mesh& mesh, int count, const std::vector<int>& landmarks, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    const auto n = mesh.size();
    Matrix raw(3 * n, count);
    for (int k = 0; k < count; ++k) {
        for (int axis = 0; axis < 3; ++axis) {
            const Eigen::Vector3d freq(1.5 * normal(rng), 1.5 * normal(rng), 1.5 * normal(rng));
            const double phase = 2.0 * std::numbers::pi * uniform01(rng);
            const double amp = axis == 2 ? 0.5 : 1.0;
            for (Eigen::Index i = 0; i < n; ++i) raw(3 * i + axis, k) = amp * std::sin(mesh.vertices.row(i).dot(freq) + phase);
        }
    }
    return orthonormalize(remove_affine_part(raw, mesh, landmarks));
}

struct SyntheticModels {
    MorphableModel identity;
    MorphableModel action_units;  // template = the synthetic template
    std::vector<int> landmark_ids;
};

inline SyntheticModels make_synthetic_models(int n_vertices, int id_components, int au_components, std::uint64_t seed) {
    if (n_vertices < kNumLandmarks) throw InvalidArgument("synthetic meshes need at least 68 vertices");
    SyntheticModels out;
    const Mesh tmpl = make_synthetic_template(n_vertices, derive_seed(seed, 1));

    std::vector<int> all(static_cast<std::size_t>(n_vertices));
    std::iota(all.begin(), all.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, 2));
    std::shuffle(all.begin(), all.end(), rng);
    out.landmark_ids.assign(all.begin(), all.begin() + kNumLandmarks);

    const auto centers = farthest_point_order(tmpl, out.landmark_ids, au_components, derive_seed(seed, 3));
    out.action_units = {tmpl, make_localized_components(tmpl, centers, out.landmark_ids, derive_seed(seed, 4)), ModelKind::ActionUnit};
    out.identity = {tmpl, make_smooth_components(tmpl, id_components, out.landmark_ids, derive_seed(seed, 5)), ModelKind::Identity};
    return out;
}

// ---- trajectories ---------------------------------------------------------------------

/// Peak activation magnitude scale; actual peaks are drawn in [0.75, 1.25] times this.
inline constexpr double kPeakActivation = 0.8;

/// Raised-cosine onset-apex-offset profile in [0, 1]: 0 at the first and last frame,
/// 1 at frame (L-1)/2. A single-frame clip stays at the onset value 0.
inline double activation_profile(int frame, int seq_len) {
    if (seq_len <= 1) return 0.0;
    return 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * frame / static_cast<double>(seq_len - 1)));
}

/// Peak amplitude drawn for a trajectory seed.
inline double trajectory_peak(std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, 11));
    return kPeakActivation * (0.75 + 0.5 * uniform01(rng));
}

/// Class `c` activates component c only: alpha_t[c] = peak * profile(t), zeros elsewhere.
inline AlphaSequence gen_alpha_trajectory(int class_id, int seq_len, int K, std::uint64_t seed) {
    if (class_id < 0 || class_id >= K) throw InvalidArgument("class id must be in [0, K)");
    if (seq_len < 1) throw InvalidArgument("sequence length must be >= 1");
    AlphaSequence traj = AlphaSequence::Zero(seq_len, K);
    const double peak = trajectory_peak(seed);
    for (int t = 0; t < seq_len; ++t) traj(t, class_id) = peak * activation_profile(t, seq_len);
    return traj;
}

// ---- forward rendering ------------------------------------------------------------------

/// Per frame: synthesize, restrict to landmarks, project, then add seeded Gaussian noise
/// to x and y. z is the model-space depth of the landmark.
inline std::vector<Landmarks3D> render_synthetic_landmarks(const AlphaSequence& traj, const MorphableModel& model,
                                                           const std::vector<int>& landmark_ids, const CameraModel& camera,
                                                           double noise_sigma, std::uint64_t seed) {
    if (traj.cols() != model.component_count()) throw InvalidArgument("trajectory width differs from the model's K");
    if (landmark_ids.size() != static_cast<std::size_t>(kNumLandmarks)) throw InvalidArgument("need 68 landmark ids");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<Landmarks3D> out;
    out.reserve(static_cast<std::size_t>(traj.rows()));
    for (Eigen::Index t = 0; t < traj.rows(); ++t) {
        const Mesh shape = synthesize(model, traj.row(t).transpose());
        const Eigen::MatrixX3d pts = restrict_mesh(shape, landmark_ids);
        Eigen::MatrixX3d l(kNumLandmarks, 3);
        l.leftCols<2>() = project(camera, pts);
        l.col(2) = pts.col(2);
        if (noise_sigma > 0.0) {
            for (int i = 0; i < kNumLandmarks; ++i) {
                l(i, 0) += noise_sigma * noise(rng);
                l(i, 1) += noise_sigma * noise(rng);
            }
        }
        out.emplace_back(std::move(l));
    }
    return out;
}

/// Upright face centered on a square sensor: scale ~0.3 * size px per model unit, up to
/// 8 degrees yaw/pitch, 5 degrees roll and 1.5 px of translation jitter.
inline CameraModel random_camera(int sensor_size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto sym = [&](double a) { return a * (2.0 * uniform01(rng) - 1.0); };
    const double deg = std::numbers::pi / 180.0;
    const double yaw = sym(8.0 * deg), pitch = sym(8.0 * deg), roll = sym(5.0 * deg);
    const Eigen::Matrix3d R = (Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX()))
                                  .toRotationMatrix();
    const double s = 0.3 * sensor_size * (0.95 + 0.1 * uniform01(rng));
    CameraModel cam;
    cam.A.row(0) = s * R.row(0);
    cam.A.row(1) = -s * R.row(1);  // image rows grow downwards
    cam.t = Eigen::Vector2d(0.5 * sensor_size + sym(1.5), 0.5 * sensor_size + sym(1.5));
    return cam;
}

struct SyntheticEvents {
    EventStream stream;
    std::size_t clipped = 0;  // landmark positions clamped into the sensor
};

/// Events from point motion. `tracks[k]` holds the 2-D pixel positions of the same
/// points at frame k. For k >= 1, every point whose rounded pixel changed since frame
/// k-1 emits `events_per_frame` OFF events at the departure pixel and as many ON events
/// at the arrival pixel, at seeded uniform times inside window k.
inline SyntheticEvents gen_point_events(const std::vector<Eigen::MatrixX2d>& tracks, std::uint32_t width,
                                        std::uint32_t height, int events_per_frame, std::uint64_t seed,
                                        std::uint64_t delta_t = kDefaultDeltaT) {
    if (events_per_frame < 0) throw InvalidArgument("events_per_frame must be >= 0");
    if (width == 0 || height == 0) throw InvalidArgument("sensor must be non-empty");
    for (const auto& t : tracks)
        if (t.rows() != tracks.front().rows()) throw ShapeError("every frame must track the same points");
    std::mt19937_64 rng(seed);
    SyntheticEvents out;
    auto pixel = [&](const Eigen::MatrixX2d& p, Eigen::Index i) {
        long x = std::lround(p(i, 0));
        long y = std::lround(p(i, 1));
        const long cx = std::clamp<long>(x, 0, static_cast<long>(width) - 1);
        const long cy = std::clamp<long>(y, 0, static_cast<long>(height) - 1);
        if (cx != x || cy != y) ++out.clipped;
        return std::pair<std::uint16_t, std::uint16_t>(static_cast<std::uint16_t>(cx), static_cast<std::uint16_t>(cy));
    };
    std::vector<Event> events;
    std::uniform_int_distribution<std::uint64_t> when(0, delta_t - 1);
    for (std::size_t k = 1; k < tracks.size(); ++k) {
        const std::uint64_t t0 = k * delta_t;
        for (Eigen::Index i = 0; i < tracks[k].rows(); ++i) {
            const auto from = pixel(tracks[k - 1], i);
            const auto to = pixel(tracks[k], i);
            if (from == to) continue;
            for (int e = 0; e < events_per_frame; ++e) {
                events.push_back({t0 + when(rng), from.first, from.second, Polarity::Off});
                events.push_back({t0 + when(rng), to.first, to.second, Polarity::On});
            }
        }
    }
    out.stream = make_event_stream(width, height, std::move(events));
    return out;
}

/// gen_point_events on the x, y columns of a landmark sequence.
inline SyntheticEvents gen_synthetic_events(const std::vector<Landmarks3D>& landmark_seq, std::uint32_t width,
                                            std::uint32_t height, int events_per_frame, std::uint64_t seed,
                                            std::uint64_t delta_t = kDefaultDeltaT) {
    std::vector<Eigen::MatrixX2d> tracks;
    tracks.reserve(landmark_seq.size());
    for (const auto& l : landmark_seq) tracks.push_back(l.xy());
    return gen_point_events(tracks, width, height, events_per_frame, seed, delta_t);
}

/// Aggregates, renders and resamples a stream into exactly `n_frames` model frames
/// (windows past the last event are empty).
inline std::vector<Image> stream_to_frames(const EventStream& stream, std::size_t n_frames, int image_size,
                                           std::uint64_t delta_t = kDefaultDeltaT) {
    auto frames = aggregate_periodic(stream, delta_t);
    std::vector<Image> out;
    out.reserve(n_frames);
    for (std::size_t k = 0; k < n_frames; ++k) {
        Image img;
        if (k < frames.size()) {
            img = render_frame(frames[k]);
        } else {
            EventFrame empty{k * delta_t, delta_t, stream.width, stream.height,
                             std::vector<Cell>(static_cast<std::size_t>(stream.width) * stream.height, Cell::None)};
            img = render_frame(empty);
        }
        out.push_back(resize_area(img, image_size, image_size));
    }
    return out;
}

// ---- datasets ------------------------------------------------------------------------------

struct VideoTruth {
    int class_label = 0;
    AlphaSequence alpha_au;       // planted trajectory
    Vector alpha_identity;        // planted identity coefficients
    CameraModel camera;
    std::vector<Landmarks3D> landmarks;  // noisy, what a detector would report
    EventStream events;                  // from noiseless motion of every mesh vertex
    AlphaSequence alpha_fitted;   // two-step fit on the noisy landmarks (the training target)
};

struct SyntheticDataset {
    SynthSpec spec;
    SyntheticModels models;
    std::vector<VideoSample> samples;
    std::vector<VideoTruth> truth;  // aligned with samples
    std::vector<bool> is_test;
};

/// Identity coefficient spread (model units).
inline constexpr double kIdentitySigma = 0.15;

/// Videos are ordered class-major; the last round(test_fraction * n) videos of each
/// class (after a seeded shuffle) form the test split.
inline SyntheticDataset make_dataset(const SynthSpec& spec, unsigned threads = 1) {
    if (const auto e = spec.validate(); !e.empty()) throw InvalidArgument(e.front());
    SyntheticDataset ds;
    ds.spec = spec;
    ds.models = make_synthetic_models(spec.mesh_size, spec.id_components, spec.K, derive_seed(spec.seed, 100));
    const int n_videos = spec.n_classes * spec.n_videos_per_class;
    ds.samples.resize(static_cast<std::size_t>(n_videos));
    ds.truth.resize(static_cast<std::size_t>(n_videos));
    ds.is_test.assign(static_cast<std::size_t>(n_videos), false);

    FitConfig fit_cfg;
    fit_cfg.lambda_reg = spec.lambda_reg;

    parallel_for(static_cast<std::size_t>(n_videos), threads, [&](std::size_t v) {
        const int cls = static_cast<int>(v) / spec.n_videos_per_class;
        const std::uint64_t vs = derive_seed(spec.seed, 1000 + v);
        VideoTruth& gt = ds.truth[v];
        gt.class_label = cls;
        gt.alpha_au = gen_alpha_trajectory(cls, spec.seq_len, spec.K, derive_seed(vs, 1));
        std::mt19937_64 id_rng(derive_seed(vs, 2));
        std::normal_distribution<double> id_dist(0.0, kIdentitySigma);
        gt.alpha_identity = Vector(spec.id_components);
        for (auto& a : gt.alpha_identity) a = id_dist(id_rng);
        gt.camera = random_camera(spec.sensor_size, derive_seed(vs, 3));

        const Mesh identity_shape = synthesize(ds.models.identity, gt.alpha_identity);
        const MorphableModel subject{identity_shape, ds.models.action_units.components, ModelKind::ActionUnit};
        gt.landmarks = render_synthetic_landmarks(gt.alpha_au, subject, ds.models.landmark_ids, gt.camera, spec.noise_sigma,
                                                  derive_seed(vs, 4));
        std::vector<Eigen::MatrixX2d> surface;
        for (Eigen::Index t = 0; t < gt.alpha_au.rows(); ++t)
            surface.push_back(project(gt.camera, synthesize(subject, gt.alpha_au.row(t).transpose()).vertices));
        const auto sensor = static_cast<std::uint32_t>(spec.sensor_size);
        gt.events = gen_point_events(surface, sensor, sensor, spec.events_per_frame, derive_seed(vs, 5)).stream;

        const IdentityFit id_fit = fit_identity(gt.landmarks.front(), ds.models.identity, ds.models.landmark_ids, fit_cfg);
        gt.alpha_fitted = fit_au_sequence(gt.landmarks, id_fit.shape, ds.models.action_units, ds.models.landmark_ids, fit_cfg);

        VideoSample& s = ds.samples[v];
        s.id = "video" + std::to_string(v);
        s.frames = stream_to_frames(gt.events, static_cast<std::size_t>(spec.seq_len), spec.image_size);
        s.alpha_targets = gt.alpha_fitted;
        s.class_label = cls;
        s.valid_len = static_cast<std::size_t>(spec.seq_len);
    });

    std::mt19937_64 split_rng(derive_seed(spec.seed, 200));
    const int n_test = static_cast<int>(std::lround(spec.test_fraction * spec.n_videos_per_class));
    for (int c = 0; c < spec.n_classes; ++c) {
        std::vector<int> idx(static_cast<std::size_t>(spec.n_videos_per_class));
        std::iota(idx.begin(), idx.end(), c * spec.n_videos_per_class);
        std::shuffle(idx.begin(), idx.end(), split_rng);
        for (int i = 0; i < n_test; ++i) ds.is_test[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = true;
    }
    return ds;
}

}  // namespace evmorph

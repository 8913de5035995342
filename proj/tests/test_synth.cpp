#include <gtest/gtest.h>

#include <set>

#include "evmorph.hpp"

using namespace evmorph;

namespace {

SynthSpec small_spec(int classes, int per_class, std::uint64_t seed = 1) {
    SynthSpec s;
    s.n_classes = classes;
    s.n_videos_per_class = per_class;
    s.seq_len = 8;
    s.K = 8;
    s.id_components = 4;
    s.seed = seed;
    return s;
}

std::vector<Landmarks3D> still_face(int frames, double x0) {
    Eigen::MatrixX3d p(kNumLandmarks, 3);
    for (int i = 0; i < kNumLandmarks; ++i) p.row(i) << x0 + (i % 10), 5.0 + i / 10, 0.0;
    return std::vector<Landmarks3D>(static_cast<std::size_t>(frames), Landmarks3D(p));
}

}  // namespace

TEST(Trajectory, ProfileEndpointsAndApex) {
    EXPECT_EQ(activation_profile(0, 1), 0.0);
    EXPECT_EQ(gen_alpha_trajectory(0, 1, 4, 3).norm(), 0.0);
    EXPECT_NEAR(activation_profile(0, 9), 0.0, 1e-15);
    EXPECT_NEAR(activation_profile(8, 9), 0.0, 1e-15);
    EXPECT_NEAR(activation_profile(4, 9), 1.0, 1e-15);
}

TEST(Trajectory, ClassActivatesOnlyItsComponent) {
    for (int c = 0; c < 4; ++c) {
        const auto t = gen_alpha_trajectory(c, 9, 6, 17);
        for (int k = 0; k < 6; ++k)
            if (k != c) EXPECT_EQ(t.col(k).norm(), 0.0);
        EXPECT_DOUBLE_EQ(t(4, c), trajectory_peak(17));
        EXPECT_DOUBLE_EQ(t.col(c).maxCoeff(), t(4, c));
    }
    const double p = trajectory_peak(5);
    EXPECT_GE(p, 0.75 * kPeakActivation);
    EXPECT_LE(p, 1.25 * kPeakActivation);
    EXPECT_THROW(gen_alpha_trajectory(6, 9, 6, 1), InvalidArgument);
    EXPECT_THROW(gen_alpha_trajectory(0, 0, 6, 1), InvalidArgument);
}

TEST(Models, StructureOfSyntheticModels) {
    const auto m = make_synthetic_models(100, 6, 12, 4);
    EXPECT_EQ(m.identity.vertex_count(), 100);
    EXPECT_EQ(m.identity.component_count(), 6);
    EXPECT_EQ(m.action_units.component_count(), 12);
    const Matrix& C = m.identity.components;
    EXPECT_LT((C.transpose() * C - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-10);
    const std::set<int> ids(m.landmark_ids.begin(), m.landmark_ids.end());
    EXPECT_EQ(ids.size(), 68u);
    EXPECT_LT(*ids.rbegin(), 100);
    // No affine component on the landmark vertices: the camera cannot absorb them.
    for (const Matrix* comps : {&m.identity.components, &m.action_units.components})
        EXPECT_LT((remove_affine_part(*comps, m.identity.mean, m.landmark_ids) - *comps).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_THROW(make_synthetic_models(50, 6, 12, 4), InvalidArgument);
}

TEST(Render, ZeroTrajectoryGivesConstantLandmarks) {
    const auto m = make_synthetic_models(100, 4, 8, 2);
    const auto cam = random_camera(32, 9);
    const auto seq = render_synthetic_landmarks(AlphaSequence::Zero(5, 8), m.action_units, m.landmark_ids, cam, 0.0, 0);
    ASSERT_EQ(seq.size(), 5u);
    for (const auto& l : seq) EXPECT_EQ(l.points, seq.front().points);
    // The face sits on the sensor.
    EXPECT_GT(seq.front().points.col(0).minCoeff(), 0.0);
    EXPECT_LT(seq.front().points.col(0).maxCoeff(), 32.0);
}

TEST(Render, NoiselessRoundTripThroughTwoStepFit) {
    const auto m = make_synthetic_models(100, 4, 8, 3);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, kIdentitySigma);
    Vector alpha_id(4);
    for (auto& a : alpha_id) a = n(rng);
    const Mesh subject_shape = synthesize(m.identity, alpha_id);
    const MorphableModel subject{subject_shape, m.action_units.components, ModelKind::ActionUnit};
    FitConfig cfg;
    cfg.lambda_reg = 1e-9;
    for (int c = 0; c < 4; ++c) {
        const auto traj = gen_alpha_trajectory(c, 9, 8, 10 + c);
        const auto seq = render_synthetic_landmarks(traj, subject, m.landmark_ids, random_camera(64, 20 + c), 0.0, 0);
        const IdentityFit id = fit_identity(seq.front(), m.identity, m.landmark_ids, cfg);
        EXPECT_LT((id.alpha - alpha_id).norm() / alpha_id.norm(), 1e-3);
        const auto est = fit_au_sequence(seq, id.shape, m.action_units, m.landmark_ids, cfg);
        EXPECT_LT((est - traj).norm() / traj.norm(), 1e-3) << c;
    }
}

TEST(Events, StaticLandmarksEmitNothing) {
    const auto e = gen_synthetic_events(still_face(6, 3.0), 32, 32, 4, 1);
    EXPECT_TRUE(e.stream.events.empty());
    EXPECT_EQ(e.clipped, 0u);
}

TEST(Events, OnePixelShiftEmitsTwoEventsPerPolarityPairPerWindow) {
    auto seq = still_face(2, 3.0);
    seq[1] = still_face(1, 4.0).front();
    const int epf = 3;
    const auto e = gen_synthetic_events(seq, 32, 32, epf, 2);
    EXPECT_EQ(e.stream.events.size(), static_cast<std::size_t>(2 * epf * kNumLandmarks));
    std::size_t on = 0;
    for (const auto& ev : e.stream.events) {
        EXPECT_GE(ev.t, kDefaultDeltaT);
        EXPECT_LT(ev.t, 2 * kDefaultDeltaT);
        on += ev.p == Polarity::On;
    }
    EXPECT_EQ(on, static_cast<std::size_t>(epf * kNumLandmarks));
    // Frame 1 shows ON at the arrival and OFF at the departure of each column shift.
    const auto frames = aggregate_periodic(e.stream, kDefaultDeltaT);
    ASSERT_EQ(frames.size(), 2u);
    EXPECT_EQ(frames[1].at(5, 3), Cell::Off);
    EXPECT_EQ(frames[1].at(5, 13), Cell::On);
}

TEST(Events, StreamIsValidAndClampsOutOfSensorPoints) {
    auto seq = still_face(3, 3.0);
    seq[2] = still_face(1, 30.0).front();
    const auto e = gen_synthetic_events(seq, 32, 32, 2, 3);
    EXPECT_GT(e.clipped, 0u);
    EXPECT_TRUE(std::is_sorted(e.stream.events.begin(), e.stream.events.end(),
                               [](const Event& a, const Event& b) { return a.t < b.t; }));
    for (const auto& ev : e.stream.events) {
        EXPECT_LT(ev.x, 32);
        EXPECT_LT(ev.y, 32);
    }
    EXPECT_THROW(gen_synthetic_events(seq, 0, 32, 2, 3), InvalidArgument);
}

TEST(Events, StreamToFramesPadsToRequestedLength) {
    auto seq = still_face(2, 3.0);
    seq[1] = still_face(1, 4.0).front();
    const auto e = gen_synthetic_events(seq, 32, 32, 1, 4);
    const auto frames = stream_to_frames(e.stream, 5, 16);
    ASSERT_EQ(frames.size(), 5u);
    for (const auto& f : frames) {
        EXPECT_EQ(f.height, 16);
        EXPECT_EQ(f.width, 16);
    }
    for (int k : {0, 2, 3, 4})
        for (float v : frames[static_cast<std::size_t>(k)].values) EXPECT_EQ(v, 0.5f);
}

TEST(Dataset, BalancedLabelsAndShapes) {
    const auto ds = make_dataset(small_spec(4, 2));
    ASSERT_EQ(ds.samples.size(), 8u);
    std::vector<int> count(4, 0);
    for (const auto& s : ds.samples) {
        ++count[static_cast<std::size_t>(s.class_label)];
        EXPECT_EQ(s.frames.size(), 8u);
        EXPECT_EQ(s.alpha_targets.rows(), 8);
        EXPECT_EQ(s.alpha_targets.cols(), 8);
        EXPECT_EQ(s.frames.front().height, 32);
    }
    for (int c : count) EXPECT_EQ(c, 2);
}

TEST(Dataset, SplitIsPerClassAndSized) {
    const auto ds = make_dataset(small_spec(3, 5));
    std::vector<int> test_per_class(3, 0);
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        if (ds.is_test[i]) ++test_per_class[static_cast<std::size_t>(ds.samples[i].class_label)];
    for (int c : test_per_class) EXPECT_EQ(c, 1);
}

TEST(Dataset, SeededAndThreadIndependent) {
    const auto a = make_dataset(small_spec(2, 2, 7));
    const auto b = make_dataset(small_spec(2, 2, 7), 3);
    const auto c = make_dataset(small_spec(2, 2, 8));
    ASSERT_EQ(a.samples.size(), b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_EQ(a.samples[i].frames, b.samples[i].frames);
        EXPECT_EQ(a.samples[i].alpha_targets, b.samples[i].alpha_targets);
        EXPECT_EQ(a.truth[i].events, b.truth[i].events);
    }
    EXPECT_NE(a.samples[0].alpha_targets, c.samples[0].alpha_targets);
}

TEST(Dataset, FittedTargetsTrackPlantedTrajectory) {
    const auto ds = make_dataset(small_spec(4, 2));
    for (const auto& gt : ds.truth) {
        const int c = gt.class_label;
        // The planted component dominates the fitted coefficients at the apex.
        Eigen::Index arg;
        gt.alpha_fitted.row(4).cwiseAbs().maxCoeff(&arg);
        EXPECT_EQ(arg, c);
        // Ridge shrinks the magnitude; the profile shape survives the noise.
        EXPECT_GT(gt.alpha_fitted(4, c), 0.5 * gt.alpha_au(4, c));
        EXPECT_LT(gt.alpha_fitted(4, c), gt.alpha_au(4, c));
        const Vector a = gt.alpha_fitted.col(c), b = gt.alpha_au.col(c);
        const double corr = (a.array() - a.mean()).matrix().dot((b.array() - b.mean()).matrix()) /
                            ((a.array() - a.mean()).matrix().norm() * (b.array() - b.mean()).matrix().norm());
        EXPECT_GT(corr, 0.95);
    }
}

TEST(Dataset, PlantedAndFittedAlphaAreSeparable) {
    const auto ds = make_dataset(small_spec(4, 10));
    std::vector<int> labels;
    std::vector<AlphaSequence> planted, fitted;
    for (const auto& gt : ds.truth) {
        labels.push_back(gt.class_label);
        planted.push_back(gt.alpha_au);
        fitted.push_back(gt.alpha_fitted);
    }
    AlphaClassifierConfig cfg;
    cfg.embed_dim = 16;
    cfg.depth = 1;
    cfg.num_classes = 4;
    cfg.train.epochs = 40;
    cfg.train.learning_rate = 1e-2;
    EXPECT_EQ(train_alpha_classifier(planted, labels, ds.is_test, cfg).test_metrics.top1, 1.0);
    EXPECT_EQ(train_alpha_classifier(fitted, labels, ds.is_test, cfg).test_metrics.top1, 1.0);
}

TEST(Dataset, RejectsInvalidSpec) {
    auto s = small_spec(4, 2);
    s.K = 2;
    EXPECT_FALSE(s.validate().empty());
    EXPECT_THROW(make_dataset(s), InvalidArgument);
    s = small_spec(4, 2);
    s.mesh_size = 40;
    EXPECT_THROW(make_dataset(s), InvalidArgument);
}

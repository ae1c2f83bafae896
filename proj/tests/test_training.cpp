#include <gtest/gtest.h>

#include <cmath>

#include "dfa/training.hpp"
#include "test_util.hpp"

using dfa::Activation;
using dfa::LossKind;
using dfa::Matrix;
using dfa::Network;
using dfa::SeededRng;
using dfa::TrainMode;

namespace {

Matrix random_onehot(SeededRng& rng, std::size_t rows, std::size_t classes) {
    Matrix y(rows, classes);
    for (std::size_t i = 0; i < rows; ++i)
        y(i, rng.next_u64() % classes) = 1.0;
    return y;
}

// Independent evaluation of the DFA update rule for an MLP, all explicit
// loops: delta_W_i = [(B_i delta_ay) o f'_i(a_i)] h_{i-1}^T.
void naive_mlp_dfa_grads(const Network& net, const dfa::ForwardTrace& tr,
                         const Matrix& delta_ay,
                         std::map<std::string, Matrix>& out) {
    const std::size_t depth = net.layers.size();
    for (std::size_t i = 0; i < depth; ++i) {
        const auto& layer = std::get<dfa::DenseLayer>(net.layers[i].impl);
        const auto& t = std::get<dfa::DenseTrace>(tr.layers[i]);
        const Matrix& h_prev = i == 0 ? tr.input : tr.layer_output(i - 1);
        const std::size_t batch = delta_ay.rows();
        Matrix dw(layer.out_dim(), layer.in_dim());
        Matrix db(1, layer.out_dim());
        for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t j = 0; j < layer.out_dim(); ++j) {
                double signal = 0.0;
                if (i + 1 == depth) {
                    signal = delta_ay(n, j);  // topmost layer: true derivative
                } else {
                    const Matrix b = net.feedback[i].dense();
                    for (std::size_t e = 0; e < b.cols(); ++e)
                        signal += b(j, e) * delta_ay(n, e);
                }
                const double da =
                    signal * dfa::activate_deriv(layer.act, t.r.a(n, j));
                for (std::size_t m = 0; m < layer.in_dim(); ++m)
                    dw(j, m) += da * h_prev(n, m);
                db(0, j) += da;
            }
        }
        out[net.layers[i].id + ".weight"] = std::move(dw);
        out[net.layers[i].id + ".bias"] = std::move(db);
    }
}

}  // namespace

TEST(LossAndError, MseZeroWhenEqual) {
    SeededRng rng(3);
    Matrix y = dfa_test::random_matrix(rng, 4, 3);
    auto r = dfa::loss_and_error(LossKind::Mse, y, y);
    EXPECT_DOUBLE_EQ(r.loss, 0.0);
    for (double v : r.delta.flat()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LossAndError, UniformLogitsCrossEntropyIsLogThree) {
    Matrix yhat(5, 3);  // all-zero logits -> uniform softmax
    Matrix y = Matrix(5, 3);
    for (std::size_t i = 0; i < 5; ++i) y(i, i % 3) = 1.0;
    auto r = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, yhat, y);
    EXPECT_NEAR(r.loss, std::log(3.0), 1e-12);
}

TEST(LossAndError, DeltaMatchesFiniteDifferences) {
    SeededRng rng(5);
    for (LossKind kind : {LossKind::Mse, LossKind::SoftmaxCrossEntropy}) {
        Matrix yhat = dfa_test::random_matrix(rng, 4, 3);
        Matrix y = kind == LossKind::Mse ? dfa_test::random_matrix(rng, 4, 3)
                                         : random_onehot(rng, 4, 3);
        auto r = dfa::loss_and_error(kind, yhat, y);
        auto loss = [&]() { return dfa::loss_and_error(kind, yhat, y).loss; };
        EXPECT_LT(dfa_test::max_fd_discrepancy(yhat, r.delta, loss, 1e-6), 1e-6);
    }
}

TEST(LossAndError, ShapeMismatch) {
    EXPECT_THROW(dfa::loss_and_error(LossKind::Mse, Matrix(2, 3), Matrix(3, 3)),
                 dfa::ShapeError);
}

TEST(ForwardTrace, DepthOneIdentityPassesInputThrough) {
    Network net;
    dfa::LayerNode node;
    node.id = "layer1";
    dfa::DenseLayer l;
    l.weight = Matrix{{1, 0}, {0, 1}};
    l.bias = Matrix(1, 2);
    l.act = Activation::Identity;
    node.impl = l;
    net.layers.push_back(std::move(node));
    Matrix x{{1.5, -2.5}, {0.25, 4.0}};
    auto tr = dfa::forward_trace(net, x);
    EXPECT_EQ(tr.output(), x);
}

TEST(ForwardTrace, ThreeLayerTraceHasThreePairs) {
    SeededRng rng(7);
    Network net = dfa::make_mlp(rng, 4, {5, 6}, 3, Activation::Relu);
    Matrix x = dfa_test::random_matrix(rng, 2, 4);
    auto tr = dfa::forward_trace(net, x);
    EXPECT_EQ(tr.layers.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& t = std::get<dfa::DenseTrace>(tr.layers[i]);
        EXPECT_EQ(t.r.a.rows(), 2u);
        EXPECT_EQ(t.r.h.rows(), 2u);
    }
}

TEST(ForwardTrace, DropoutSeedReproducesTraceBitwise) {
    SeededRng rng(9);
    Network net = dfa::make_mlp(rng, 4, {8, 8}, 3, Activation::Relu);
    Matrix x = dfa_test::random_matrix(rng, 5, 4);
    SeededRng d1(1234), d2(1234);
    dfa::DropoutCtx c1{0.4, &d1}, c2{0.4, &d2};
    auto t1 = dfa::forward_trace(net, x, c1);
    auto t2 = dfa::forward_trace(net, x, c2);
    EXPECT_EQ(t1.output(), t2.output());
}

TEST(BackwardBp, ZeroDeltaGivesZeroGradients) {
    SeededRng rng(11);
    Network net = dfa::make_mlp(rng, 4, {5}, 3, Activation::Tanh);
    Matrix x = dfa_test::random_matrix(rng, 2, 4);
    auto tr = dfa::forward_trace(net, x);
    auto gs = dfa::backward_bp(net, tr, Matrix(2, 3));
    for (const auto& [name, g] : gs)
        for (double v : g.flat()) EXPECT_EQ(v, 0.0) << name;
}

TEST(BackwardBp, MlpGradsMatchFiniteDifferences) {
    SeededRng rng(13);
    for (Activation act : {Activation::Relu, Activation::Tanh, Activation::Elu}) {
        Network net = dfa::make_mlp(rng, 5, {7, 6}, 4, act);
        Matrix x = dfa_test::random_matrix(rng, 3, 5);
        Matrix y = random_onehot(rng, 3, 4);

        auto loss = [&]() {
            auto tr = dfa::forward_trace(net, x);
            return dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y).loss;
        };
        auto tr = dfa::forward_trace(net, x);
        auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
        auto gs = dfa::backward_bp(net, tr, lr.delta);
        for (auto& [name, p] : net.params()) {
            ASSERT_TRUE(gs.contains(name)) << name;
            EXPECT_LT(dfa_test::max_fd_discrepancy(*p, gs.at(name), loss), 1e-5)
                << name << " act=" << to_string(act);
        }
    }
}

// Two-layer linear network with a hand-derived symbolic gradient.
// f identity, mse loss: dL/dW1 = W2^T delta h0^T with delta = 2(yhat-y)/batch.
TEST(BackwardBp, TwoLayerLinearMatchesHandComputation) {
    Network net;
    dfa::DenseLayer l1;
    l1.weight = Matrix{{1, 2}, {3, 4}};
    l1.bias = Matrix(1, 2);
    l1.act = Activation::Identity;
    dfa::DenseLayer l2;
    l2.weight = Matrix{{0.5, -1}, {2, 1.5}};
    l2.bias = Matrix(1, 2);
    l2.act = Activation::Identity;
    dfa::LayerNode n1{"layer1", l1}, n2{"layer2", l2};
    net.layers = {n1, n2};

    Matrix x{{1, -1}};
    Matrix y{{0, 0}};
    auto tr = dfa::forward_trace(net, x);
    // forward: h1 = x W1^T = [1*1+(-1)*2, 1*3+(-1)*4] = [-1, -1]
    // yhat = h1 W2^T = [-0.5+1, -2-1.5] = [0.5, -3.5]
    ASSERT_DOUBLE_EQ(tr.output()(0, 0), 0.5);
    ASSERT_DOUBLE_EQ(tr.output()(0, 1), -3.5);
    auto lr = dfa::loss_and_error(LossKind::Mse, tr.output(), y);
    // delta = 2*(yhat - y)/1 = [1, -7]
    auto gs = dfa::backward_bp(net, tr, lr.delta);
    // dW2 = delta^T h1 = [[1],[-7]] [-1,-1] = [[-1,-1],[7,7]]
    EXPECT_DOUBLE_EQ(gs.at("layer2.weight")(0, 0), -1.0);
    EXPECT_DOUBLE_EQ(gs.at("layer2.weight")(0, 1), -1.0);
    EXPECT_DOUBLE_EQ(gs.at("layer2.weight")(1, 0), 7.0);
    EXPECT_DOUBLE_EQ(gs.at("layer2.weight")(1, 1), 7.0);
    // delta_h1 = delta W2 = [1*0.5 + (-7)*2, 1*(-1) + (-7)*1.5] = [-13.5, -11.5]
    // dW1 = delta_h1^T x = [[-13.5, 13.5], [-11.5, 11.5]]
    EXPECT_DOUBLE_EQ(gs.at("layer1.weight")(0, 0), -13.5);
    EXPECT_DOUBLE_EQ(gs.at("layer1.weight")(0, 1), 13.5);
    EXPECT_DOUBLE_EQ(gs.at("layer1.weight")(1, 0), -11.5);
    EXPECT_DOUBLE_EQ(gs.at("layer1.weight")(1, 1), 11.5);
}

TEST(BackwardBp, GraphConvGradsMatchFiniteDifferences) {
    SeededRng rng(17);
    const std::size_t n = 6;
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            a(i, j) = a(j, i) = rng.next_double() < 0.4 ? 1.0 : 0.0;
    auto adj = std::make_shared<Matrix>(dfa::normalize_adjacency(a));
    Network net = dfa::make_gcn(rng, adj, 4, {5}, 3, Activation::Relu);
    Matrix x = dfa_test::random_matrix(rng, n, 4);
    Matrix y = random_onehot(rng, n, 3);
    std::vector<int> mask{0, 2, 4};

    auto loss = [&]() {
        auto tr = dfa::forward_trace(net, x);
        return dfa::loss_and_error_masked(LossKind::SoftmaxCrossEntropy, tr.output(), y,
                                          mask)
            .loss;
    };
    auto tr = dfa::forward_trace(net, x);
    auto lr =
        dfa::loss_and_error_masked(LossKind::SoftmaxCrossEntropy, tr.output(), y, mask);
    auto gs = dfa::backward_bp(net, tr, lr.delta);
    for (auto& [name, p] : net.params())
        EXPECT_LT(dfa_test::max_fd_discrepancy(*p, gs.at(name), loss), 1e-5) << name;
}

TEST(BackwardBp, CharLmGradsMatchFiniteDifferences) {
    SeededRng rng(19);
    Network net = dfa::make_char_lm(rng, 5, 8, 2, 2, 12, true, true);
    std::vector<int> ids{1, 3, 0, 4};
    Matrix y = random_onehot(rng, 4, 5);

    auto loss = [&]() {
        auto tr = dfa::forward_trace_ids(net, ids);
        return dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y).loss;
    };
    auto tr = dfa::forward_trace_ids(net, ids);
    auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
    auto gs = dfa::backward_bp(net, tr, lr.delta);
    for (auto& [name, p] : net.params()) {
        ASSERT_TRUE(gs.contains(name)) << name;
        EXPECT_LT(dfa_test::max_fd_discrepancy(*p, gs.at(name), loss), 1e-5) << name;
    }
}

TEST(BackwardDfa, TopLayerGradientBitwiseEqualsBp) {
    SeededRng rng(23);
    Network net = dfa::make_mlp(rng, 6, {8, 7}, 4, Activation::Tanh);
    net.mode = TrainMode::DFA;
    SeededRng fb_rng = rng.fork(1);
    dfa::attach_feedback(net, fb_rng, false);
    Matrix x = dfa_test::random_matrix(rng, 3, 6);
    Matrix y = random_onehot(rng, 3, 4);
    auto tr = dfa::forward_trace(net, x);
    auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
    auto dfa_gs = dfa::backward_dfa(net, tr, lr.delta);
    auto bp_gs = dfa::backward_bp(net, tr, lr.delta);
    EXPECT_EQ(dfa_gs.at("layer3.weight"), bp_gs.at("layer3.weight"));
    EXPECT_EQ(dfa_gs.at("layer3.bias"), bp_gs.at("layer3.bias"));
}

TEST(BackwardDfa, TransposeOverrideCollapsesToBp) {
    SeededRng rng(29);
    Network net = dfa::make_mlp(rng, 5, {6}, 3, Activation::Tanh);
    net.mode = TrainMode::DFA;
    // B := W2^T turns the projected signal into the exact BP signal
    const auto& w2 = std::get<dfa::DenseLayer>(net.layers[1].impl).weight;
    net.feedback = {dfa::FeedbackMatrix(
        "layer1", std::make_shared<Matrix>(dfa::transpose(w2)), 6, 3, 1.0)};
    Matrix x = dfa_test::random_matrix(rng, 4, 5);
    Matrix y = random_onehot(rng, 4, 3);
    auto tr = dfa::forward_trace(net, x);
    auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
    auto dfa_gs = dfa::backward_dfa(net, tr, lr.delta);
    auto bp_gs = dfa::backward_bp(net, tr, lr.delta);
    for (const auto& [name, g] : bp_gs)
        EXPECT_LT(dfa::max_abs_diff(dfa_gs.at(name), g), 1e-12) << name;
}

TEST(BackwardDfa, MatchesNaiveLoopOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SeededRng rng(1000 + seed);
        Network net = dfa::make_mlp(rng, 4, {6, 5, 7}, 3, Activation::Elu);
        net.mode = TrainMode::DFA;
        SeededRng fb = rng.fork(9);
        dfa::attach_feedback(net, fb, false);
        Matrix x = dfa_test::random_matrix(rng, 3, 4);
        Matrix y = random_onehot(rng, 3, 3);
        auto tr = dfa::forward_trace(net, x);
        auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
        auto gs = dfa::backward_dfa(net, tr, lr.delta);

        std::map<std::string, Matrix> naive;
        naive_mlp_dfa_grads(net, tr, lr.delta, naive);
        for (const auto& [name, g] : naive)
            EXPECT_LT(dfa::max_abs_diff(gs.at(name), g), 1e-12) << name;
    }
}

TEST(BackwardDfa, MissingFeedbackIsConfigError) {
    SeededRng rng(31);
    Network net = dfa::make_mlp(rng, 4, {5}, 3, Activation::Relu);
    net.mode = TrainMode::DFA;
    Matrix x = dfa_test::random_matrix(rng, 2, 4);
    auto tr = dfa::forward_trace(net, x);
    EXPECT_THROW(dfa::backward_dfa(net, tr, Matrix(2, 3)), dfa::ConfigError);
}

TEST(BackwardShallow, OnlyTopRegionTrainedAndBitwiseEqualToBp) {
    SeededRng rng(37);
    Network net = dfa::make_mlp(rng, 5, {6, 6}, 3, Activation::Relu);
    Matrix x = dfa_test::random_matrix(rng, 4, 5);
    Matrix y = random_onehot(rng, 4, 3);
    auto tr = dfa::forward_trace(net, x);
    auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
    auto gs = dfa::backward_shallow(net, tr, lr.delta);
    EXPECT_EQ(gs.size(), 2u);  // weight + bias of the top layer only
    auto bp = dfa::backward_bp(net, tr, lr.delta);
    EXPECT_EQ(gs.at("layer3.weight"), bp.at("layer3.weight"));
    EXPECT_EQ(gs.at("layer3.bias"), bp.at("layer3.bias"));
}

TEST(BackwardShallow, HiddenWeightsFrozenOverSteps) {
    SeededRng rng(41);
    Network net = dfa::make_mlp(rng, 4, {8}, 3, Activation::Relu);
    net.mode = TrainMode::Shallow;
    const auto h1 = dfa::content_hash(std::get<dfa::DenseLayer>(net.layers[0].impl).weight);
    dfa::OptimizerState opt;
    opt.kind = dfa::OptimizerKind::Sgd;
    opt.lr = 0.1;
    Matrix x = dfa_test::random_matrix(rng, 6, 4);
    Matrix y = random_onehot(rng, 6, 3);
    for (int step = 0; step < 100; ++step) {
        auto tr = dfa::forward_trace(net, x);
        auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
        auto gs = dfa::backward_shallow(net, tr, lr.delta);
        dfa::optimizer_step(opt, net.params(), gs);
    }
    EXPECT_EQ(dfa::content_hash(std::get<dfa::DenseLayer>(net.layers[0].impl).weight), h1);
}

TEST(Optimizer, SgdUnitRateZerosParams) {
    dfa::OptimizerState opt;
    opt.kind = dfa::OptimizerKind::Sgd;
    opt.lr = 1.0;
    Matrix p{{2.0, -3.0}};
    dfa::GradientSet gs;
    gs.add_to("p", p);
    std::vector<std::pair<std::string, Matrix*>> params{{"p", &p}};
    dfa::optimizer_step(opt, params, gs);
    for (double v : p.flat()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Optimizer, AdamFirstStepMagnitudeIsLrIndependentOfScale) {
    for (double scale : {1e-4, 1.0, 1e4}) {
        dfa::OptimizerState opt;
        opt.kind = dfa::OptimizerKind::Adam;
        opt.lr = 0.01;
        Matrix p{{5.0}};
        Matrix g{{scale}};
        dfa::GradientSet gs;
        gs.add_to("p", g);
        std::vector<std::pair<std::string, Matrix*>> params{{"p", &p}};
        dfa::optimizer_step(opt, params, gs);
        EXPECT_NEAR(std::abs(p(0, 0) - 5.0), opt.lr, 1e-6) << scale;
    }
}

TEST(Optimizer, ZeroGradientLeavesParamsUnchanged) {
    for (auto kind : {dfa::OptimizerKind::Sgd, dfa::OptimizerKind::Adam}) {
        dfa::OptimizerState opt;
        opt.kind = kind;
        opt.lr = 0.5;
        Matrix p{{1.0, 2.0}};
        dfa::GradientSet gs;
        gs.add_to("p", Matrix(1, 2));
        std::vector<std::pair<std::string, Matrix*>> params{{"p", &p}};
        dfa::optimizer_step(opt, params, gs);
        EXPECT_DOUBLE_EQ(p(0, 0), 1.0);
        EXPECT_DOUBLE_EQ(p(0, 1), 2.0);
    }
}

TEST(Optimizer, UnknownGradientKeyIsContractError) {
    dfa::OptimizerState opt;
    Matrix p{{1.0}};
    dfa::GradientSet gs;
    gs.add_to("other", Matrix(1, 1));
    std::vector<std::pair<std::string, Matrix*>> params{{"p", &p}};
    EXPECT_THROW(dfa::optimizer_step(opt, params, gs), dfa::ContractError);
}

TEST(PlateauScheduler, ReducesAfterPatienceNonImprovingEpochs) {
    dfa::OptimizerState opt;
    opt.lr = 1.0;
    dfa::PlateauScheduler sched;
    sched.factor = 0.2;
    sched.patience = 2;
    sched.observe(1.0, opt);  // improvement (from +inf)
    EXPECT_DOUBLE_EQ(opt.lr, 1.0);
    sched.observe(1.1, opt);  // wait = 1
    EXPECT_DOUBLE_EQ(opt.lr, 1.0);
    sched.observe(1.05, opt);  // wait = 2 -> reduce
    EXPECT_DOUBLE_EQ(opt.lr, 0.2);
    sched.observe(0.5, opt);  // new best
    sched.observe(0.6, opt);
    sched.observe(0.6, opt);
    EXPECT_DOUBLE_EQ(opt.lr, 0.2 * 0.2);
}

TEST(PlateauScheduler, LearningRateNonIncreasing) {
    SeededRng rng(43);
    dfa::OptimizerState opt;
    opt.lr = 1.0;
    dfa::PlateauScheduler sched;
    double last = opt.lr;
    for (int i = 0; i < 50; ++i) {
        sched.observe(rng.uniform(0.0, 10.0), opt);
        EXPECT_LE(opt.lr, last);
        last = opt.lr;
    }
}

#include <gtest/gtest.h>

#include "dfa/alignment.hpp"
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
    for (std::size_t i = 0; i < rows; ++i) y(i, rng.next_u64() % classes) = 1.0;
    return y;
}

}  // namespace

TEST(MeasureAlignment, TransposeOverrideGivesCosineOne) {
    SeededRng rng(3);
    Network net = dfa::make_mlp(rng, 5, {6}, 3, Activation::Tanh);
    net.mode = TrainMode::DFA;
    const auto& w2 = std::get<dfa::DenseLayer>(net.layers[1].impl).weight;
    net.feedback = {dfa::FeedbackMatrix(
        "layer1", std::make_shared<Matrix>(dfa::transpose(w2)), 6, 3, 1.0)};
    Matrix x = dfa_test::random_matrix(rng, 8, 5);
    Matrix y = random_onehot(rng, 8, 3);
    auto records = dfa::measure_alignment(net, x, y, LossKind::SoftmaxCrossEntropy);
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].layer_id, "layer1");
    EXPECT_EQ(records[0].sample_count, 8u);
    EXPECT_NEAR(records[0].mean_cosine, 1.0, 1e-12);
    EXPECT_NEAR(records[0].std_cosine, 0.0, 1e-12);
}

TEST(MeasureAlignment, RandomHighDimSignalsNearZero) {
    SeededRng rng(5);
    Network net = dfa::make_mlp(rng, 4, {10000}, 3, Activation::Tanh);
    net.mode = TrainMode::DFA;
    SeededRng fb = rng.fork(2);
    dfa::attach_feedback(net, fb, false);
    Matrix x = dfa_test::random_matrix(rng, 30, 4);
    Matrix y = random_onehot(rng, 30, 3);
    auto records = dfa::measure_alignment(net, x, y, LossKind::SoftmaxCrossEntropy);
    ASSERT_EQ(records.size(), 1u);
    EXPECT_LT(std::abs(records[0].mean_cosine), 0.05);
}

TEST(MeasureAlignment, SideEffectFree) {
    SeededRng rng(7);
    Network net = dfa::make_mlp(rng, 5, {7, 6}, 3, Activation::Relu);
    net.mode = TrainMode::DFA;
    SeededRng fb = rng.fork(3);
    dfa::attach_feedback(net, fb, false);
    Matrix x = dfa_test::random_matrix(rng, 10, 5);
    Matrix y = random_onehot(rng, 10, 3);
    const auto h0 = net.param_hash();
    dfa::measure_alignment(net, x, y, LossKind::SoftmaxCrossEntropy);
    EXPECT_EQ(net.param_hash(), h0);
}

TEST(MeasureAlignment, TopLayerExcluded) {
    SeededRng rng(9);
    Network net = dfa::make_mlp(rng, 5, {6, 6}, 3, Activation::Tanh);
    net.mode = TrainMode::DFA;
    SeededRng fb = rng.fork(4);
    dfa::attach_feedback(net, fb, false);
    Matrix x = dfa_test::random_matrix(rng, 4, 5);
    Matrix y = random_onehot(rng, 4, 3);
    auto records = dfa::measure_alignment(net, x, y, LossKind::SoftmaxCrossEntropy);
    ASSERT_EQ(records.size(), 2u);
    for (const auto& r : records) EXPECT_NE(r.layer_id, "layer3");
}

TEST(MeasureAlignment, ZeroNormSamplesSkippedAndCounted) {
    SeededRng rng(11);
    Network net = dfa::make_mlp(rng, 5, {6}, 3, Activation::Tanh);
    net.mode = TrainMode::DFA;
    SeededRng fb = rng.fork(5);
    dfa::attach_feedback(net, fb, false);
    Matrix x = dfa_test::random_matrix(rng, 4, 5);
    auto tr = dfa::forward_trace(net, x);
    Matrix delta(4, 3);
    delta(0, 0) = 0.5;  // rows 1..3 are all-zero -> zero DFA signal
    delta(0, 2) = -0.5;
    dfa::AlignmentAccumulator acc(net);
    acc.add(tr, delta);
    auto records = acc.records();
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].sample_count, 1u);
    EXPECT_EQ(records[0].skipped, 3u);
}

TEST(MeasureAlignment, RequiresDfaMode) {
    SeededRng rng(13);
    Network net = dfa::make_mlp(rng, 5, {6}, 3, Activation::Tanh);
    net.mode = TrainMode::BP;
    EXPECT_THROW(dfa::AlignmentAccumulator acc(net), dfa::ModeError);
}

// Alignment on a token network, micro granularity: records cover both
// sub-layer boundaries of every block.
TEST(MeasureAlignment, MicroTransformerBoundaries) {
    SeededRng rng(17);
    Network net = dfa::make_char_lm(rng, 6, 8, 2, 2, 12);
    net.mode = TrainMode::DFA;
    net.granularity = dfa::FeedbackGranularity::Micro;
    SeededRng fb = rng.fork(6);
    dfa::attach_feedback(net, fb, false);

    std::vector<int> ids{0, 1, 2, 3, 4};
    auto tr = dfa::forward_trace_ids(net, ids);
    Matrix y = random_onehot(rng, 5, 6);
    auto lr = dfa::loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
    dfa::AlignmentAccumulator acc(net);
    acc.add(tr, lr.delta);
    auto records = acc.records();
    ASSERT_EQ(records.size(), 4u);
    EXPECT_EQ(records[0].layer_id, "block1.attn");
    EXPECT_EQ(records[1].layer_id, "block1.ffn");
    EXPECT_EQ(records[2].layer_id, "block2.attn");
    EXPECT_EQ(records[3].layer_id, "block2.ffn");
    for (const auto& r : records) EXPECT_EQ(r.sample_count, 5u);
}

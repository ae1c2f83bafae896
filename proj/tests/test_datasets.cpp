#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "dfa/datasets.hpp"
#include "test_util.hpp"

using dfa::Matrix;
using dfa::SeededRng;

namespace {

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "dfa_dataset_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

void check_partition(std::size_t n, const std::vector<int>& a, const std::vector<int>& b,
                     const std::vector<int>& c) {
    std::set<int> seen;
    for (const auto* v : {&a, &b, &c})
        for (int i : *v) EXPECT_TRUE(seen.insert(i).second) << "duplicate index " << i;
    EXPECT_EQ(seen.size(), n);
}

// Minimal consistent planetoid-family fixture: 9 nodes, test nodes 6..8.
void write_planetoid_fixture(const std::filesystem::path& dir, bool corrupt_x = false) {
    // allx: 6 rows x 4 features, sparse
    write_file(dir / "ind.tiny.allx",
               "SPARSE 6 4 6\n0 0 1\n1 1 1\n2 2 1\n3 3 1\n4 0 0.5\n5 1 0.5\n");
    // x: first 2 rows of allx (labeled train nodes)
    write_file(dir / "ind.tiny.x",
               corrupt_x ? "SPARSE 2 4 2\n0 0 9\n1 1 1\n" : "SPARSE 2 4 2\n0 0 1\n1 1 1\n");
    write_file(dir / "ind.tiny.y", "DENSE 2 3\n1 0 0\n0 1 0\n");
    write_file(dir / "ind.tiny.ally",
               "DENSE 6 3\n1 0 0\n0 1 0\n0 0 1\n1 0 0\n0 1 0\n0 0 1\n");
    write_file(dir / "ind.tiny.tx", "SPARSE 3 4 3\n0 3 1\n1 2 1\n2 1 1\n");
    write_file(dir / "ind.tiny.ty", "DENSE 3 3\n0 0 1\n0 1 0\n1 0 0\n");
    // directed edges (1->0 not listed) and a self loop at 4 to be dropped
    write_file(dir / "ind.tiny.graph",
               "0: 1 2\n1: 2\n2: 0 1 3\n3: 2 6\n4: 4 5\n5: 4 7\n6: 3\n7: 5 8\n8: 7\n");
    write_file(dir / "ind.tiny.test.index", "7\n8\n6\n");
}

}  // namespace

TEST(GenBlobs, SeedDeterminism) {
    SeededRng r1(5), r2(5);
    auto a = dfa::gen_blobs(r1, 20, 3, 8, 0.5);
    auto b = dfa::gen_blobs(r2, 20, 3, 8, 0.5);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.train_idx, b.train_idx);
}

TEST(GenBlobs, SplitPartitions) {
    SeededRng rng(7);
    auto ds = dfa::gen_blobs(rng, 25, 4, 8, 0.5);
    EXPECT_EQ(ds.size(), 100u);
    EXPECT_EQ(ds.train_idx.size(), 80u);
    EXPECT_EQ(ds.val_idx.size(), 10u);
    EXPECT_EQ(ds.test_idx.size(), 10u);
    check_partition(100, ds.train_idx, ds.val_idx, ds.test_idx);
}

TEST(GenBlobs, ZeroSpreadCollapsesClasses) {
    SeededRng rng(9);
    auto ds = dfa::gen_blobs(rng, 5, 3, 6, 0.0);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t s = 1; s < 5; ++s)
            for (std::size_t j = 0; j < 6; ++j)
                EXPECT_EQ(ds.features(c * 5 + s, j), ds.features(c * 5, j));
}

TEST(GenBlobs, RejectsTooManyClasses) {
    SeededRng rng(11);
    EXPECT_THROW(dfa::gen_blobs(rng, 5, 9, 8, 0.5), dfa::ParameterError);
}

TEST(GenSbm, StructuralInvariants) {
    SeededRng rng(13);
    auto ds = dfa::gen_sbm_graph(rng, 30, 3, 0.3, 0.02, 0.5, 5, 5);
    const std::size_t n = ds.size();
    EXPECT_EQ(n, 90u);
    for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(ds.adjacency(i, i), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            EXPECT_EQ(ds.adjacency(i, j), ds.adjacency(j, i));
            EXPECT_TRUE(ds.adjacency(i, j) == 0.0 || ds.adjacency(i, j) == 1.0);
        }
    }
    EXPECT_EQ(ds.train_idx.size(), 15u);
    EXPECT_EQ(ds.val_idx.size(), 15u);
    check_partition(n, ds.train_idx, ds.val_idx, ds.test_idx);
}

TEST(GenSbm, RejectsInvalidProbabilities) {
    SeededRng rng(17);
    EXPECT_THROW(dfa::gen_sbm_graph(rng, 10, 2, 0.1, 0.2, 0.0), dfa::ParameterError);
    EXPECT_THROW(dfa::gen_sbm_graph(rng, 10, 2, 1.5, 0.0, 0.0), dfa::ParameterError);
}

TEST(GenSbm, SeedDeterminism) {
    SeededRng r1(19), r2(19);
    auto a = dfa::gen_sbm_graph(r1, 60, 2, 0.2, 0.01, 1.0);
    auto b = dfa::gen_sbm_graph(r2, 60, 2, 0.2, 0.01, 1.0);
    EXPECT_EQ(a.adjacency, b.adjacency);
    EXPECT_EQ(a.features, b.features);
}

TEST(LoadPlanetoid, ReconstructsCanonicalLayout) {
    auto dir = temp_dir();
    write_planetoid_fixture(dir);
    auto ds = dfa::load_planetoid(dir.string(), "tiny");
    EXPECT_EQ(ds.size(), 9u);
    EXPECT_EQ(ds.features.cols(), 4u);
    EXPECT_EQ(ds.n_classes(), 3u);

    // tx row r lands at node test.index[r]: tx[0] -> node 7, tx[2] -> node 6
    EXPECT_EQ(ds.features(7, 3), 1.0);
    EXPECT_EQ(ds.features(8, 2), 1.0);
    EXPECT_EQ(ds.features(6, 1), 1.0);
    EXPECT_EQ(ds.labels(7, 2), 1.0);
    EXPECT_EQ(ds.labels(6, 0), 1.0);

    // adjacency symmetrized, self loop at 4 dropped
    EXPECT_EQ(ds.adjacency(4, 4), 0.0);
    EXPECT_EQ(ds.adjacency(0, 1), 1.0);
    EXPECT_EQ(ds.adjacency(1, 0), 1.0);

    // canonical split: train = first |y| nodes, val next (clamped), test sorted
    EXPECT_EQ(ds.train_idx, (std::vector<int>{0, 1}));
    EXPECT_EQ(ds.val_idx, (std::vector<int>{2, 3, 4, 5}));
    EXPECT_EQ(ds.test_idx, (std::vector<int>{6, 7, 8}));
}

TEST(LoadPlanetoid, FailsLoudlyOnDrift) {
    auto dir = temp_dir();
    write_planetoid_fixture(dir, /*corrupt_x=*/true);
    try {
        dfa::load_planetoid(dir.string(), "tiny");
        FAIL() << "expected IngestError";
    } catch (const dfa::IngestError& e) {
        EXPECT_NE(std::string(e.what()).find("prefix of allx"), std::string::npos);
    }
    write_planetoid_fixture(dir);  // restore
}

TEST(LoadPlanetoid, MissingFileNamesPath) {
    try {
        dfa::load_planetoid("/nonexistent/dir", "tiny");
        FAIL() << "expected IngestError";
    } catch (const dfa::IngestError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/ind.tiny.x"),
                  std::string::npos);
    }
}

TEST(LoadPlanetoid, CanonicalRoundTrip) {
    auto dir = temp_dir();
    write_planetoid_fixture(dir);
    auto ds = dfa::load_planetoid(dir.string(), "tiny");
    const std::string text = dfa::serialize_graph_canonical(ds);
    auto re = dfa::parse_graph_canonical(text);
    EXPECT_EQ(re.adjacency, ds.adjacency);
    EXPECT_EQ(re.features, ds.features);
    EXPECT_EQ(re.labels, ds.labels);
    EXPECT_EQ(re.train_idx, ds.train_idx);
    EXPECT_EQ(re.val_idx, ds.val_idx);
    EXPECT_EQ(re.test_idx, ds.test_idx);
    EXPECT_EQ(dfa::serialize_graph_canonical(re), text);
}

TEST(LoadTextChars, AbabVocabulary) {
    auto path = temp_dir() / "abab.txt";
    std::string s;
    for (int i = 0; i < 500; ++i) s += "ab";
    write_file(path, s);
    auto ds = dfa::load_text_chars(path.string(), 16);
    EXPECT_EQ(ds.vocab_size(), 3u);  // <unk> + 'a' + 'b'
    EXPECT_EQ(ds.ids.size(), 1000u);
    EXPECT_EQ(ds.vocab[1], static_cast<std::uint32_t>('a'));
    EXPECT_EQ(ds.vocab[2], static_cast<std::uint32_t>('b'));
}

TEST(LoadTextChars, TargetsAreInputsShiftedByOne) {
    auto path = temp_dir() / "shift.txt";
    write_file(path, dfa::gen_text_corpus(7, 4000));
    auto ds = dfa::load_text_chars(path.string(), 32);
    for (int split : {0, 1, 2}) {
        const std::size_t count = ds.chunk_count(split);
        ASSERT_GT(count, 0u) << split;
        for (std::size_t c = 0; c < count; ++c) {
            std::vector<int> input, target;
            ds.chunk(split, c, input, target);
            ASSERT_EQ(input.size(), 32u);
            ASSERT_EQ(target.size(), 32u);
            const std::size_t base = ds.region(split).begin + c * 32;
            for (std::size_t t = 0; t < 32; ++t) {
                EXPECT_EQ(input[t], ds.ids[base + t]);
                EXPECT_EQ(target[t], ds.ids[base + t + 1]);
            }
        }
    }
}

TEST(LoadTextChars, SplitRatios) {
    auto path = temp_dir() / "ratios.txt";
    write_file(path, std::string(1000, 'x'));
    auto ds = dfa::load_text_chars(path.string(), 10);
    EXPECT_EQ(ds.train_end, 900u);
    EXPECT_EQ(ds.val_end, 950u);
}

TEST(LoadTextChars, EmptyFileRejected) {
    auto path = temp_dir() / "empty.txt";
    write_file(path, "");
    EXPECT_THROW(dfa::load_text_chars(path.string(), 8), dfa::IngestError);
}

TEST(LoadTextChars, Utf8AndWorkingSetCap) {
    auto path = temp_dir() / "utf8.txt";
    write_file(path, "caf\xC3\xA9 nai\xCC\x88ve");  // é and combining diaeresis
    auto ds = dfa::load_text_chars(path.string(), 2);
    EXPECT_GT(ds.vocab_size(), 5u);
    for (int id : ds.ids) {
        EXPECT_GE(id, 0);
        EXPECT_LT(static_cast<std::size_t>(id), ds.vocab_size());
    }
}

TEST(GenTextCorpus, DeterministicAndSized) {
    const std::string a = dfa::gen_text_corpus(42, 10000);
    const std::string b = dfa::gen_text_corpus(42, 10000);
    EXPECT_EQ(a, b);
    EXPECT_GE(a.size(), 10000u);
    EXPECT_LT(a.size(), 11000u);
    EXPECT_NE(dfa::gen_text_corpus(43, 1000), dfa::gen_text_corpus(44, 1000));
}

TEST(ExportCsv, TabularHeaderAndRows) {
    SeededRng rng(23);
    auto ds = dfa::gen_blobs(rng, 5, 2, 4, 0.1);
    std::ostringstream out;
    dfa::export_tabular_csv(ds, out);
    const std::string text = out.str();
    EXPECT_NE(text.find("split,label,f0,f1,f2,f3"), std::string::npos);
    std::size_t lines = 0;
    for (char ch : text) lines += ch == '\n';
    EXPECT_EQ(lines, 11u);  // header + 10 rows
}

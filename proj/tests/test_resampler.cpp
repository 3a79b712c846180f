#include <doctest.h>

#include <cmath>
#include <vector>

#include "v2flow/decoder.hpp"
#include "v2flow/resampler.hpp"
#include "v2flow/vocab.hpp"

using namespace v2flow;

namespace {

Image make_test_image(int size, uint64_t seed) {
    Image img(size, size, 3);
    Rng rng(seed);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform01());
    return img;
}

}  // namespace

TEST_CASE("conv encoder produces the contracted grid shape") {
    Rng rng(2);
    ConvEncoder<float> enc(3, 8, 64, rng);
    const Image img = make_test_image(32, 5);
    const auto grid = enc.forward(img);
    CHECK(grid.dims == std::vector<int>{4, 4, 64});
}

TEST_CASE("conv encoder is deterministic") {
    Rng rng(2);
    ConvEncoder<float> enc(3, 4, 32, rng);
    const Image img = make_test_image(16, 7);
    const auto a = enc.forward(img);
    const auto b = enc.forward(img);
    CHECK(*a.data == *b.data);
}

TEST_CASE("zero image through zero-bias encoder gives a zero grid") {
    Rng rng(9);
    ConvEncoder<float> enc(3, 8, 64, rng);  // biases are zero at construction
    const Image img(32, 32, 3);
    const auto grid = enc.forward(img);
    for (float v : *grid.data) CHECK(v == 0.0f);
}

TEST_CASE("conv encoder rejects indivisible dimensions") {
    Rng rng(1);
    ConvEncoder<float> enc(3, 8, 64, rng);
    const Image img(20, 20, 3);
    CHECK_THROWS_AS(enc.forward(img), ShapeError);
}

TEST_CASE("resampler with n == h*w is the row-major flatten at initialization") {
    Rng rng(3);
    Resampler<float> rs(16, 8, 1, rng);
    Tensor<float> grid({4, 4, 8});
    Rng vals(11);
    for (auto& v : *grid.data) v = static_cast<float>(vals.normal());
    const auto out = rs.forward(grid);
    CHECK(out.dims == std::vector<int>{16, 8});
    for (size_t i = 0; i < grid.data->size(); ++i) CHECK((*out.data)[i] == (*grid.data)[i]);
}

TEST_CASE("uniform attention yields the mean latent repeated n times") {
    Rng rng(4);
    Resampler<float> rs(3, 4, 1, rng);
    // zero queries give zero logits (uniform weights); value and output
    // projections set to identity; feed-forward stays zero.
    std::fill(rs.queries.data->begin(), rs.queries.data->end(), 0.f);
    std::fill(rs.wv.data->begin(), rs.wv.data->end(), 0.f);
    std::fill(rs.wo.data->begin(), rs.wo.data->end(), 0.f);
    for (int i = 0; i < 4; ++i) {
        (*rs.wv.data)[static_cast<size_t>(i) * 4 + i] = 1.f;
        (*rs.wo.data)[static_cast<size_t>(i) * 4 + i] = 1.f;
    }
    Tensor<float> grid({2, 2, 4});
    Rng vals(12);
    for (auto& v : *grid.data) v = static_cast<float>(vals.normal());
    const auto out = rs.forward(grid);
    for (int r = 0; r < 3; ++r) {
        for (int j = 0; j < 4; ++j) {
            double mean = 0;
            for (int p = 0; p < 4; ++p) mean += (*grid.data)[static_cast<size_t>(p) * 4 + j];
            mean /= 4;
            CHECK((*out.data)[static_cast<size_t>(r) * 4 + j] == doctest::Approx(mean).epsilon(1e-5));
        }
    }
}

TEST_CASE("resampler matches a hand-rolled cross-attention oracle") {
    Rng rng(5);
    Resampler<double> rs(4, 6, 1, rng);
    // randomize the zero-initialized pieces so the oracle exercises everything
    fill_normal(rs.wo, rng, 0.3);
    fill_normal(rs.ff_w2, rng, 0.3);
    fill_normal(rs.ff_b2, rng, 0.1);

    Tensor<double> grid({4, 4, 6});
    Rng vals(13);
    for (auto& v : *grid.data) v = vals.normal();
    const auto out = rs.forward(grid);

    const int n = 4, d = 6, hw = 16;
    auto matvec = [&](const std::vector<double>& in, const Tensor<double>& w, int rows) {
        std::vector<double> o(static_cast<size_t>(rows) * d, 0.0);
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k) o[r * d + j] += in[r * d + k] * (*w.data)[k * d + j];
        return o;
    };
    const std::vector<double> base(*rs.queries.data);
    const std::vector<double> seq(*grid.data);
    const auto q = matvec(base, rs.wq, n);
    const auto k = matvec(seq, rs.wk, hw);
    const auto v = matvec(seq, rs.wv, hw);
    std::vector<double> attn(static_cast<size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        std::vector<double> logits(hw);
        for (int j = 0; j < hw; ++j) {
            double dot = 0;
            for (int e = 0; e < d; ++e) dot += q[i * d + e] * k[j * d + e];
            logits[j] = dot / std::sqrt(static_cast<double>(d));
        }
        double mx = logits[0], sum = 0;
        for (double l : logits) mx = std::max(mx, l);
        std::vector<double> w(hw);
        for (int j = 0; j < hw; ++j) {
            w[j] = std::exp(logits[j] - mx);
            sum += w[j];
        }
        for (int e = 0; e < d; ++e) {
            double acc = 0;
            for (int j = 0; j < hw; ++j) acc += w[j] / sum * v[j * d + e];
            attn[i * d + e] = acc;
        }
    }
    const auto proj = matvec(attn, rs.wo, n);
    std::vector<double> mid(static_cast<size_t>(n) * d);
    for (size_t i = 0; i < mid.size(); ++i) mid[i] = base[i] + proj[i];
    // feed-forward
    std::vector<double> h1(static_cast<size_t>(n) * 4 * d, 0.0);
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < 4 * d; ++j) {
            double acc = (*rs.ff_b1.data)[j];
            for (int e = 0; e < d; ++e) acc += mid[r * d + e] * (*rs.ff_w1.data)[e * 4 * d + j];
            h1[r * 4 * d + j] = acc * 0.5 * (1.0 + std::erf(acc * 0.7071067811865475));
        }
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < d; ++j) {
            double acc = (*rs.ff_b2.data)[j];
            for (int e = 0; e < 4 * d; ++e) acc += h1[r * 4 * d + e] * (*rs.ff_w2.data)[e * d + j];
            CHECK(std::abs((*out.data)[static_cast<size_t>(r) * d + j] - (mid[r * d + j] + acc)) < 1e-5);
        }
}

TEST_CASE("resampler rejects more outputs than grid positions") {
    Rng rng(6);
    Resampler<float> rs(5, 4, 1, rng);
    Tensor<float> grid({2, 2, 4});
    CHECK_THROWS_AS(rs.forward(grid), ConfigError);
}

TEST_CASE("gumbel_alpha basics") {
    auto logits = Tensor<double>::from({1, 4}, {1.5, 1.5, 1.5, 1.5});
    const std::vector<double> zero(4, 0.0);
    const auto a = gumbel_alpha(logits, zero, 1.0);
    for (auto v : *a.data) CHECK(v == doctest::Approx(0.25));

    auto logits2 = Tensor<double>::from({1, 3}, {0.3, 1.1, 0.2});
    const std::vector<double> zero3(3, 0.0);
    const auto sharp = gumbel_alpha(logits2, zero3, 1e-3);
    CHECK((*sharp.data)[1] == doctest::Approx(1.0));

    auto logits3 = Tensor<double>::from({1, 3}, {2, 1, 0});
    const auto soft = gumbel_alpha(logits3, zero3, 1.0);
    CHECK(std::abs((*soft.data)[0] - 0.6652) < 1e-3);
    CHECK(std::abs((*soft.data)[1] - 0.2447) < 1e-3);
    CHECK(std::abs((*soft.data)[2] - 0.0900) < 1e-3);

    CHECK_THROWS_AS(gumbel_alpha(logits3, zero3, 0.0), ConfigError);
    CHECK_THROWS_AS(gumbel_alpha(logits3, zero3, -1.0), ConfigError);
}

TEST_CASE("gumbel_alpha rows stay on the simplex across temperatures") {
    Rng rng(8);
    for (double tau : {1e-2, 0.3, 1.0, 10.0}) {
        Tensor<float> logits({7, 11});
        for (auto& v : *logits.data) v = static_cast<float>(rng.normal() * 5.0);
        const auto noise = draw_gumbel_noise<float>(logits.numel(), rng);
        const auto a = gumbel_alpha(logits, noise, static_cast<float>(tau));
        for (int r = 0; r < 7; ++r) {
            float sum = 0;
            for (int j = 0; j < 11; ++j) {
                const float v = (*a.data)[static_cast<size_t>(r) * 11 + j];
                CHECK(v >= 0.f);
                sum += v;
            }
            CHECK(std::abs(sum - 1.f) < 1e-5f);
        }
    }
}

TEST_CASE("argmax of zero-noise assignment is invariant to temperature") {
    Rng rng(10);
    Tensor<double> logits({5, 9});
    for (auto& v : *logits.data) v = rng.normal() * 3.0;
    const std::vector<double> zero(static_cast<size_t>(logits.numel()), 0.0);
    std::vector<int> ref;
    for (double tau : {0.1, 1.0, 10.0}) {
        const auto a = gumbel_alpha(logits, zero, tau);
        std::vector<int> am;
        for (int r = 0; r < 5; ++r) {
            int best = 0;
            for (int j = 1; j < 9; ++j) {
                if ((*a.data)[static_cast<size_t>(r) * 9 + j] > (*a.data)[static_cast<size_t>(r) * 9 + best]) best = j;
            }
            am.push_back(best);
        }
        if (ref.empty()) {
            ref = am;
        } else {
            CHECK(ref == am);
        }
    }
}

TEST_CASE("embed_vocab: one-hot, uniform, and weighted combinations") {
    VocabTable<double> vocab(3, 4, 123);
    Tensor<double> onehot = Tensor<double>::from({1, 3}, {0, 1, 0});
    const auto row = embed_vocab(onehot, vocab);
    for (int j = 0; j < 4; ++j) CHECK((*row.data)[j] == (*vocab.table.data)[4 + j]);

    Tensor<double> uniform = Tensor<double>::from({1, 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    const auto mean_row = embed_vocab(uniform, vocab);
    for (int j = 0; j < 4; ++j) {
        const double expect = ((*vocab.table.data)[j] + (*vocab.table.data)[4 + j] + (*vocab.table.data)[8 + j]) / 3.0;
        CHECK((*mean_row.data)[j] == doctest::Approx(expect));
    }

    Tensor<double> w = Tensor<double>::from({1, 3}, {0.6652, 0.2447, 0.0900});
    const auto wrow = embed_vocab(w, vocab);
    for (int j = 0; j < 4; ++j) {
        double expect = 0;
        for (int r = 0; r < 3; ++r) expect += (*w.data)[r] * (*vocab.table.data)[static_cast<size_t>(r) * 4 + j];
        CHECK(std::abs((*wrow.data)[j] - expect) < 1e-6);
    }
}

TEST_CASE("embed_vocab output lies in the convex hull of vocabulary rows") {
    VocabTable<float> vocab(32, 8, 7);
    Rng rng(14);
    Tensor<float> logits({6, 32});
    for (auto& v : *logits.data) v = static_cast<float>(rng.normal() * 2);
    const auto noise = draw_gumbel_noise<float>(logits.numel(), rng);
    const auto alpha = gumbel_alpha(logits, noise, 0.7f);
    const auto out = embed_vocab(alpha, vocab);
    for (int j = 0; j < 8; ++j) {
        float lo = 1e30f, hi = -1e30f;
        for (int r = 0; r < 32; ++r) {
            lo = std::min(lo, (*vocab.table.data)[static_cast<size_t>(r) * 8 + j]);
            hi = std::max(hi, (*vocab.table.data)[static_cast<size_t>(r) * 8 + j]);
        }
        for (int r = 0; r < 6; ++r) {
            const float v = (*out.data)[static_cast<size_t>(r) * 8 + j];
            CHECK(v >= lo - 1e-5f);
            CHECK(v <= hi + 1e-5f);
        }
    }
}

TEST_CASE("quantize finds exact matches and breaks ties low") {
    Codebook<double> cb(8, 2);
    for (int c = 0; c < 8; ++c) {
        (*cb.codes.data)[c * 2] = c;
        (*cb.codes.data)[c * 2 + 1] = -c;
    }
    Tensor<double> v = Tensor<double>::from({1, 2}, {7.0, -7.0});
    CHECK(cb.quantize(v) == std::vector<int>{7});

    // equidistant between codes 2 and 5
    Codebook<double> cb2(8, 2);
    std::fill(cb2.codes.data->begin(), cb2.codes.data->end(), 100.0);
    (*cb2.codes.data)[2 * 2] = 1.0;
    (*cb2.codes.data)[2 * 2 + 1] = 0.0;
    (*cb2.codes.data)[5 * 2] = -1.0;
    (*cb2.codes.data)[5 * 2 + 1] = 0.0;
    Tensor<double> mid = Tensor<double>::from({1, 2}, {0.0, 0.0});
    CHECK(cb2.quantize(mid) == std::vector<int>{2});
}

TEST_CASE("quantize matches a brute-force nearest-neighbor oracle") {
    Rng rng(15);
    Codebook<float> cb(16, 6);
    for (auto& v : *cb.codes.data) v = static_cast<float>(rng.normal());
    Tensor<float> vs({64, 6});
    for (auto& v : *vs.data) v = static_cast<float>(rng.normal());
    const auto got = cb.quantize(vs);
    for (int r = 0; r < 64; ++r) {
        double best = 1e300;
        int best_i = 0;
        for (int c = 0; c < 16; ++c) {
            double dist = 0;
            for (int j = 0; j < 6; ++j) {
                const double diff = (*vs.data)[static_cast<size_t>(r) * 6 + j] - (*cb.codes.data)[static_cast<size_t>(c) * 6 + j];
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                best_i = c;
            }
        }
        CHECK(got[static_cast<size_t>(r)] == best_i);
    }
}

TEST_CASE("quantize then lookup is idempotent") {
    Rng rng(16);
    VocabTable<float> vocab(64, 8, 3);
    auto cb = Codebook<float>::init_from_vocab(vocab, 16, 0.99, 1e-5, 3);
    Tensor<float> vs({20, 8});
    for (auto& v : *vs.data) v = static_cast<float>(rng.normal());
    const auto idx = cb.quantize(vs);
    const auto codes = cb.lookup(idx);
    CHECK(cb.quantize(codes) == idx);
}

TEST_CASE("empty codebook is rejected") {
    CHECK_THROWS_AS(Codebook<float>(0, 4), ConfigError);
}

TEST_CASE("ema decay without assignments preserves code values") {
    Codebook<double> cb(2, 2);
    (*cb.ema_sums.data) = {4.0, 2.0, 1.0, 1.0};
    cb.ema_counts = {2.0, 1.0};
    cb.recompute_codes();
    const std::vector<double> before(*cb.codes.data);
    // one row assigned to code 0 only; code 1 purely decays
    Tensor<double> v = Tensor<double>::from({1, 2}, {2.0, 1.0});
    cb.ema_update(v, {0});
    CHECK((*cb.codes.data)[2] == doctest::Approx(before[2]));
    CHECK((*cb.codes.data)[3] == doctest::Approx(before[3]));
}

TEST_CASE("zero decay jumps codes to the batch cluster means") {
    Codebook<double> cb(3, 2);
    cb.decay = 0.0;
    Tensor<double> v = Tensor<double>::from({4, 2}, {1, 1, 3, 3, 10, 0, 20, 0});
    cb.ema_update(v, {0, 0, 1, 1});
    CHECK((*cb.codes.data)[0] == doctest::Approx(2.0));
    CHECK((*cb.codes.data)[1] == doctest::Approx(2.0));
    CHECK((*cb.codes.data)[2] == doctest::Approx(15.0));
    CHECK((*cb.codes.data)[3] == doctest::Approx(0.0));
}

TEST_CASE("ema converges to the cluster mean under fixed assignment") {
    Codebook<double> cb(1, 3);
    cb.decay = 0.99;
    Rng rng(77);
    const std::vector<double> mu = {0.4, -1.2, 2.0};
    for (int step = 0; step < 500; ++step) {
        Tensor<double> batch({8, 3});
        for (int r = 0; r < 8; ++r)
            for (int j = 0; j < 3; ++j) (*batch.data)[static_cast<size_t>(r) * 3 + j] = mu[static_cast<size_t>(j)] + 0.05 * rng.normal();
        cb.ema_update(batch, std::vector<int>(8, 0));
    }
    for (int j = 0; j < 3; ++j) CHECK(std::abs((*cb.codes.data)[j] - mu[static_cast<size_t>(j)]) < 1e-2);
}

TEST_CASE("codebook stats: collapse, uniform, and entropy oracle") {
    Codebook<float> cb(4, 2);
    const auto collapsed = cb.stats(std::vector<int>(10, 2));
    CHECK(collapsed.utilization == doctest::Approx(0.25));
    CHECK(collapsed.perplexity == doctest::Approx(1.0));

    const auto uniform = cb.stats({0, 1, 2, 3, 0, 1, 2, 3});
    CHECK(uniform.utilization == doctest::Approx(1.0));
    CHECK(uniform.perplexity == doctest::Approx(4.0));

    const std::vector<int> mixed = {0, 0, 0, 1, 1, 3};
    const auto s = cb.stats(mixed);
    double entropy = 0;
    for (double p : {3.0 / 6, 2.0 / 6, 1.0 / 6}) entropy -= p * std::log(p);
    CHECK(std::abs(s.perplexity - std::exp(entropy)) < 1e-6);
    CHECK(s.utilization == doctest::Approx(0.75));

    CHECK_THROWS_AS(cb.stats({}), ContractError);
}

TEST_CASE("codebook init draws distinct vocabulary rows") {
    VocabTable<float> vocab(32, 4, 9);
    auto cb = Codebook<float>::init_from_vocab(vocab, 32, 0.99, 1e-5, 9);
    // all 32 codes requested from 32 rows: every row appears exactly once
    std::vector<int> match_count(32, 0);
    for (int c = 0; c < 32; ++c) {
        for (int r = 0; r < 32; ++r) {
            bool same = true;
            for (int j = 0; j < 4; ++j) {
                same = same && (*cb.codes.data)[static_cast<size_t>(c) * 4 + j] == (*vocab.table.data)[static_cast<size_t>(r) * 4 + j];
            }
            if (same) ++match_count[static_cast<size_t>(r)];
        }
    }
    for (int r = 0; r < 32; ++r) CHECK(match_count[static_cast<size_t>(r)] == 1);
    CHECK_THROWS_AS(Codebook<float>::init_from_vocab(vocab, 64, 0.99, 1e-5, 9), ConfigError);
}

TEST_CASE("evaluation-mode tokenization is deterministic") {
    TokenizerConfig cfg;
    cfg.image_size = 16;
    cfg.downsample_q = 4;
    cfg.latent_dim = 16;
    cfg.n_tokens = 4;
    cfg.vocab_size = 64;
    cfg.vocab_dim = 8;
    cfg.codebook_size = 16;
    cfg.patch_size = 8;
    cfg.d_model = 32;
    cfg.enc_blocks = 1;
    cfg.dec_blocks = 1;
    cfg.heads = 2;
    cfg.t_embed_dim = 8;
    TokenizerModel<float> model(cfg);
    const Image img = make_test_image(16, 21);
    const auto a = model.tokenize(img);
    const auto b = model.tokenize(img);
    CHECK(a.indices == b.indices);
    CHECK(*a.quantized_codes.data == *b.quantized_codes.data);
    for (size_t i = 0; i < a.indices.size(); ++i) {
        const float* code = model.codebook.codes.ptr() + static_cast<int64_t>(a.indices[i]) * cfg.vocab_dim;
        for (int j = 0; j < cfg.vocab_dim; ++j) {
            CHECK((*a.quantized_codes.data)[i * static_cast<size_t>(cfg.vocab_dim) + j] == code[j]);
        }
    }
}

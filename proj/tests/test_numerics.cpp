#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "minidrive/nn.hpp"
#include "minidrive/serialize.hpp"
#include "minidrive/tape.hpp"
#include "minidrive/tensor.hpp"
#include "testutil.hpp"

using namespace minidrive;

TEST_CASE("tensor basics") {
    Tensor<double> t({2, 3});
    CHECK(t.numel() == 6);
    t.at(1, 2) = 5.0;
    CHECK(t[5] == 5.0);
    auto u = t;  // shares storage
    u.at(0, 0) = 1.0;
    CHECK(t.at(0, 0) == 1.0);
    auto c = t.clone();
    c.at(0, 0) = 9.0;
    CHECK(t.at(0, 0) == 1.0);
    CHECK_THROWS(Tensor<double>::from({2, 2}, {1.0, 2.0, 3.0}));
}

TEST_CASE("reverse_gradient: x*x at x=3 gives 6") {
    ParamStore<double> ps;
    Param<double>& x = ps.create("x", {1});
    x.value[0] = 3.0;
    Tape<double> tape;
    auto vx = tape.param(x);
    auto y = mul(vx, vx);
    auto gm = reverse_gradient(tape, y, {&x});
    CHECK(gm["x"][0] == doctest::Approx(6.0));
}

TEST_CASE("reverse_gradient: sum(softmax(x)) has zero gradient") {
    ParamStore<double> ps;
    Rng rng(7);
    Param<double>& x = ps.create_normal("x", {1, 5}, rng, 1.0);
    Tape<double> tape;
    auto y = sum_all(softmax_rows(tape.param(x)));
    auto gm = reverse_gradient(tape, y, {&x});
    for (std::int64_t i = 0; i < 5; ++i) CHECK(std::abs(gm["x"][i]) < 1e-12);
}

TEST_CASE("reverse_gradient rejects non-scalar loss and non-finite values") {
    ParamStore<double> ps;
    Param<double>& x = ps.create("x", {2});
    Tape<double> tape;
    auto vx = tape.param(x);
    CHECK_THROWS(tape.backward(vx));
    x.value[0] = std::numeric_limits<double>::quiet_NaN();
    Tape<double> tape2;
    auto loss = sum_all(tape2.param(x));
    CHECK_THROWS(tape2.backward(loss));
}

TEST_CASE("2-layer MLP gradient matches finite differences") {
    ParamStore<double> ps;
    Rng rng(42);
    Linear<double> l1(ps, "l1", 4, 8, rng);
    Linear<double> l2(ps, "l2", 8, 3, rng);
    Tensor<double> x = rng.normal_tensor<double>({5, 4});
    Tensor<double> target = rng.normal_tensor<double>({5, 3});

    auto forward = [&](bool backward_pass) -> double {
        Tape<double> tape;
        auto h = gelu(l1.forward(tape, tape.constant(x)));
        auto out = l2.forward(tape, h);
        auto loss = mse_loss(out, tape.constant(target));
        if (backward_pass) tape.backward(loss);
        return loss.item();
    };
    std::string worst;
    double err = testutil::check_gradients<double>(ps, forward, 1e-5, &worst);
    INFO("worst at ", worst);
    CHECK(err < 1e-5);
}

TEST_CASE("detach blocks gradients upstream") {
    ParamStore<double> ps;
    Param<double>& x = ps.create("x", {3});
    x.value[0] = 1.0; x.value[1] = 2.0; x.value[2] = 3.0;
    Tape<double> tape;
    auto vx = tape.param(x);
    auto d = detach(scale(vx, 2.0));
    auto loss = sum_all(mul(d, vx));  // = sum(2x*x) but d is constant
    auto gm = reverse_gradient(tape, loss, {&x});
    // gradient is d (=2x), not 4x
    CHECK(gm["x"][0] == doctest::Approx(2.0));
    CHECK(gm["x"][1] == doctest::Approx(4.0));
    CHECK(gm["x"][2] == doctest::Approx(6.0));
}

TEST_CASE("smooth_l1 values") {
    ParamStore<double> ps;
    Param<double>& p = ps.create("p", {1});
    auto eval = [&](double pred, double target, double beta) {
        p.value[0] = pred;
        Tape<double> t;
        return smooth_l1_loss(t.param(p), t.constant_scalar(target), beta).item();
    };
    CHECK(eval(2.0, 2.0, 1.0) == doctest::Approx(0.0));
    CHECK(eval(2.0, 0.0, 1.0) == doctest::Approx(1.5));
    CHECK(eval(0.5, 0.0, 1.0) == doctest::Approx(0.125));
    Tape<double> t;
    CHECK_THROWS(smooth_l1_loss(t.param(p), t.constant_scalar(0.0), 0.0));
}

TEST_CASE("smooth_l1 is mean-reduced and differentiable") {
    ParamStore<double> ps;
    Rng rng(3);
    Param<double>& p = ps.create_normal("p", {4, 3}, rng, 2.0);
    Tensor<double> target = rng.normal_tensor<double>({4, 3});
    auto forward = [&](bool bw) -> double {
        Tape<double> t;
        auto loss = smooth_l1_loss(t.param(p), t.constant(target), 1.0);
        if (bw) t.backward(loss);
        return loss.item();
    };
    CHECK(testutil::check_gradients<double>(ps, forward) < 1e-5);
}

TEST_CASE("cosine_alignment_loss values") {
    ParamStore<double> ps;
    Param<double>& a = ps.create("a", {1, 3});
    Tensor<double> b({1, 3});
    auto eval = [&](std::initializer_list<double> av, std::initializer_list<double> bv, int* zeros = nullptr) {
        std::copy(av.begin(), av.end(), a.value.data());
        std::copy(bv.begin(), bv.end(), b.data());
        Tape<double> t;
        return cosine_alignment_loss(t.param(a), t.constant(b), zeros).item();
    };
    CHECK(eval({1, 2, 3}, {1, 2, 3}) == doctest::Approx(0.0));
    CHECK(eval({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(2.0));
    CHECK(eval({1, 0, 0}, {0, 1, 0}) == doctest::Approx(1.0));
    int zeros = 0;
    CHECK(eval({1, 1, 1}, {0, 0, 0}, &zeros) == doctest::Approx(1.0));
    CHECK(zeros == 1);
}

TEST_CASE("cosine_alignment_loss gradient matches finite differences") {
    ParamStore<double> ps;
    Rng rng(11);
    Param<double>& a = ps.create_normal("a", {6, 5}, rng, 1.0);
    Tensor<double> b = rng.normal_tensor<double>({6, 5});
    auto forward = [&](bool bw) -> double {
        Tape<double> t;
        auto loss = cosine_alignment_loss(t.param(a), t.constant(b));
        if (bw) t.backward(loss);
        return loss.item();
    };
    CHECK(testutil::check_gradients<double>(ps, forward) < 1e-5);
}

TEST_CASE("softmax rows sum to 1") {
    Rng rng(5);
    Tensor<double> x = rng.normal_tensor<double>({7, 9}, 3.0);
    Tape<double> t;
    auto y = softmax_rows(t.constant(x));
    for (int i = 0; i < 7; ++i) {
        double s = 0;
        for (int j = 0; j < 9; ++j) s += y.val().at(i, j);
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("layer_norm rows have mean 0 and variance 1 before affine") {
    Rng rng(6);
    Tensor<double> x = rng.normal_tensor<double>({5, 16}, 4.0);
    Tape<double> t;
    auto y = layer_norm_rows(t.constant(x), 1e-12);
    for (int i = 0; i < 5; ++i) {
        double mean = 0, var = 0;
        for (int j = 0; j < 16; ++j) mean += y.val().at(i, j);
        mean /= 16;
        for (int j = 0; j < 16; ++j) var += (y.val().at(i, j) - mean) * (y.val().at(i, j) - mean);
        var /= 16;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("multihead attention: single key/value token broadcasts its value projection") {
    ParamStore<double> ps;
    Rng rng(13);
    MultiheadAttention<double> mha(ps, "attn", 8, 2, rng);
    Tensor<double> q = rng.normal_tensor<double>({4, 8});
    Tensor<double> kv = rng.normal_tensor<double>({1, 8});
    Tape<double> t;
    auto out = mha.forward(t, t.constant(q), t.constant(kv));
    for (int i = 1; i < 4; ++i)
        for (int j = 0; j < 8; ++j) CHECK(out.val().at(i, j) == doctest::Approx(out.val().at(0, j)));
}

TEST_CASE("multihead attention: identical keys give mean of value rows") {
    ParamStore<double> ps;
    Rng rng(14);
    MultiheadAttention<double> mha(ps, "attn", 8, 2, rng);
    // same key for every token forces uniform weights; mean over value rows
    Tensor<double> kv({3, 8});
    Tensor<double> row = rng.normal_tensor<double>({1, 8});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 8; ++j) kv.at(i, j) = row[j];
    Tensor<double> q = rng.normal_tensor<double>({2, 8});
    Tape<double> t;
    auto out = mha.forward(t, t.constant(q), t.constant(kv));
    // with identical kv rows the output equals attending to one row
    Tape<double> t2;
    auto out_single = mha.forward(t2, t2.constant(q), t2.constant(row));
    for (int j = 0; j < 8; ++j) CHECK(out.val().at(0, j) == doctest::Approx(out_single.val().at(0, j)));
}

TEST_CASE("multihead attention: key permutation with matching value permutation is a no-op") {
    ParamStore<double> ps;
    Rng rng(15);
    MultiheadAttention<double> mha(ps, "attn", 12, 3, rng);
    Tensor<double> q = rng.normal_tensor<double>({4, 12});
    Tensor<double> kv = rng.normal_tensor<double>({4, 12});
    const int perm[4] = {2, 0, 3, 1};
    Tensor<double> kvp({4, 12});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 12; ++j) kvp.at(i, j) = kv.at(perm[i], j);
    Tape<double> t;
    auto a = mha.forward(t, t.constant(q), t.constant(kv));
    auto b = mha.forward(t, t.constant(q), t.constant(kvp));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 12; ++j) CHECK(a.val().at(i, j) == doctest::Approx(b.val().at(i, j)).epsilon(1e-9));
}

TEST_CASE("multihead attention rejects non-divisible head count") {
    ParamStore<double> ps;
    Rng rng(16);
    CHECK_THROWS(MultiheadAttention<double>(ps, "a", 10, 3, rng));
}

TEST_CASE("attention mask suppresses masked keys") {
    ParamStore<double> ps;
    Rng rng(17);
    MultiheadAttention<double> mha(ps, "attn", 8, 2, rng);
    Tensor<double> q = rng.normal_tensor<double>({2, 8});
    Tensor<double> kv = rng.normal_tensor<double>({5, 8});
    // masking tail keys must equal attending to the visible prefix only
    Tensor<double> mask = pad_mask<double>(5, 3);
    Tensor<double> kv3({3, 8});
    std::copy_n(kv.data(), 24, kv3.data());
    Tape<double> t;
    auto masked = mha.forward(t, t.constant(q), t.constant(kv), &mask);
    auto prefix = mha.forward(t, t.constant(q), t.constant(kv3));
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 8; ++j) CHECK(masked.val().at(i, j) == doctest::Approx(prefix.val().at(i, j)));
}

TEST_CASE("transformer block gradcheck") {
    ParamStore<double> ps;
    Rng rng(19);
    TransformerBlock<double> block(ps, "blk", 8, 2, 16, rng);
    Tensor<double> x = rng.normal_tensor<double>({5, 8});
    Tensor<double> target = rng.normal_tensor<double>({5, 8});
    auto forward = [&](bool bw) -> double {
        Tape<double> t;
        auto y = block.forward(t, t.constant(x));
        auto loss = mse_loss(y, t.constant(target));
        if (bw) t.backward(loss);
        return loss.item();
    };
    std::string worst;
    double err = testutil::check_gradients<double>(ps, forward, 1e-5, &worst);
    INFO("worst at ", worst);
    CHECK(err < 1e-5);
}

TEST_CASE("mixed op gradcheck: slicing, concat, gather, pooling, transpose") {
    ParamStore<double> ps;
    Rng rng(20);
    Param<double>& table = ps.create_normal("table", {6, 4}, rng, 1.0);
    Param<double>& w = ps.create_normal("w", {4, 4}, rng, 0.5);
    Tensor<double> target = rng.normal_tensor<double>({2, 4});
    auto forward = [&](bool bw) -> double {
        Tape<double> t;
        auto emb = gather_rows(t.param(table), {1, 3, 3, 5});   // [4,4]
        auto h = matmul(emb, transpose(t.param(w)));            // [4,4]
        auto left = slice_cols(h, 0, 2);
        auto right = slice_cols(h, 2, 2);
        auto mixed = concat_cols<double>({right, left});        // [4,4]
        auto pooled = mean_row_blocks(mixed, 2);                // [2,4]
        auto top = slice_rows(pooled, 0, 1);
        auto bot = slice_rows(pooled, 1, 1);
        auto stacked = concat_rows<double>({bot, top});         // [2,4]
        auto loss = mse_loss(stacked, t.constant(target));
        if (bw) t.backward(loss);
        return loss.item();
    };
    CHECK(testutil::check_gradients<double>(ps, forward) < 1e-5);
}

TEST_CASE("adamw: zero grad and zero decay leave parameters unchanged") {
    ParamStore<double> ps;
    Param<double>& p = ps.create("p", {3});
    p.value[0] = 1.0; p.value[1] = -2.0; p.value[2] = 0.5;
    ps.zero_grad();
    AdamW<double> opt({.lr = 0.1});
    opt.step(ps);
    CHECK(p.value[0] == doctest::Approx(1.0));
    CHECK(p.value[1] == doctest::Approx(-2.0));
    CHECK(p.value[2] == doctest::Approx(0.5));
}

TEST_CASE("adamw: first step moves by about -lr*sign(g)") {
    ParamStore<double> ps;
    Param<double>& p = ps.create("p", {2});
    p.value[0] = 1.0; p.value[1] = 1.0;
    ps.zero_grad();
    p.grad[0] = 0.7; p.grad[1] = -0.2;
    AdamW<double> opt({.lr = 0.01});
    opt.step(ps);
    CHECK(p.value[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-4));
    CHECK(p.value[1] == doctest::Approx(1.0 + 0.01).epsilon(1e-4));
}

TEST_CASE("adamw: decoupled decay scales parameters with zero grad") {
    ParamStore<double> ps;
    Param<double>& p = ps.create("p", {1});
    p.value[0] = 2.0;
    ps.zero_grad();
    AdamW<double> opt({.lr = 0.1, .weight_decay = 0.5});
    opt.step(ps);
    CHECK(p.value[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)));
}

TEST_CASE("adamw skips frozen parameters") {
    ParamStore<double> ps;
    Param<double>& p = ps.create("p", {1});
    p.value[0] = 1.0;
    p.trainable = false;
    ps.zero_grad();
    p.grad[0] = 1.0;
    AdamW<double> opt({.lr = 0.1, .weight_decay = 0.5});
    opt.step(ps);
    CHECK(p.value[0] == doctest::Approx(1.0));
}

TEST_CASE("gradients flow through frozen params into inputs") {
    ParamStore<double> frozen;
    Rng rng(23);
    Linear<double> lin(frozen, "lin", 3, 3, rng);
    frozen.set_trainable(false);
    ParamStore<double> live;
    Param<double>& x = live.create_normal("x", {2, 3}, rng, 1.0);
    auto forward = [&](bool bw) -> double {
        Tape<double> t;
        auto y = lin.forward(t, t.param(x));
        auto loss = mean_all(mul(y, y));
        if (bw) t.backward(loss);
        return loss.item();
    };
    live.zero_grad();
    forward(true);
    double gsum = 0;
    for (std::int64_t i = 0; i < x.grad.numel(); ++i) gsum += std::abs(x.grad[i]);
    CHECK(gsum > 0.0);
    CHECK(testutil::max_grad_rel_error<double>(live, [&]() { return forward(false); }) < 1e-5);
}

TEST_CASE("mul_by_scalar gradcheck") {
    ParamStore<double> ps;
    Rng rng(55);
    Param<double>& m = ps.create_normal("m", {3, 4}, rng, 1.0);
    Param<double>& s = ps.create_normal("s", {1}, rng, 1.0);
    Tensor<double> target = rng.normal_tensor<double>({3, 4});
    auto forward = [&](bool bw) -> double {
        Tape<double> t;
        auto y = mul_by_scalar(t.param(m), t.param(s));
        auto loss = mse_loss(y, t.constant(target));
        if (bw) t.backward(loss);
        return loss.item();
    };
    CHECK(testutil::check_gradients<double>(ps, forward) < 1e-5);
    Tape<double> t;
    CHECK_THROWS(mul_by_scalar(t.param(m), t.param(m)));
}

TEST_CASE("sum_grad_maps adds per-parameter") {
    GradMap<double> a, b;
    a["w"] = Tensor<double>::from({2}, {1.0, 2.0});
    b["w"] = Tensor<double>::from({2}, {10.0, 20.0});
    b["v"] = Tensor<double>::from({1}, {5.0});
    auto s = sum_grad_maps<double>({a, b});
    CHECK(s["w"][0] == doctest::Approx(11.0));
    CHECK(s["w"][1] == doctest::Approx(22.0));
    CHECK(s["v"][0] == doctest::Approx(5.0));
}

TEST_CASE("tensor blob round trip preserves names, shapes, bits") {
    ParamStore<float> ps;
    Rng rng(31);
    Linear<float> l(ps, "layer", 5, 7, rng);
    auto path = std::filesystem::temp_directory_path() / "minidrive_test_blob.bin";
    write_tensor_blob<float>(path, dump_params(ps));
    auto blob = read_tensor_blob<float>(path);
    CHECK(blob.size() == 2);
    CHECK(blob.at("layer.weight").shape() == std::vector<int>{5, 7});
    for (std::int64_t i = 0; i < l.W->value.numel(); ++i) CHECK(blob.at("layer.weight")[i] == l.W->value[i]);

    ParamStore<float> ps2;
    Rng rng2(99);
    Linear<float> l2(ps2, "layer", 5, 7, rng2);
    load_params(ps2, blob);
    CHECK(ps2.content_hash() == ps.content_hash());
    std::filesystem::remove(path);
}

TEST_CASE("load_params reports missing and mismatched tensors") {
    ParamStore<float> ps;
    Rng rng(32);
    Linear<float> l(ps, "layer", 3, 3, rng);
    std::map<std::string, Tensor<float>> blob;
    CHECK_THROWS_WITH_AS(load_params(ps, blob), doctest::Contains("layer.weight"), std::runtime_error);
    blob["layer.weight"] = Tensor<float>({4, 3});
    blob["layer.bias"] = Tensor<float>({3});
    CHECK_THROWS_AS(load_params(ps, blob), std::runtime_error);
}

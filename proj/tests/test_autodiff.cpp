#include <catch2/catch_amalgamated.hpp>

#include "arlab/autodiff.hpp"
#include "arlab/rng.hpp"

#include <cstring>
#include <vector>

using namespace arlab;

namespace {

Tensor randt(Shape shape, RngStream& rng) { return Tensor::randn(std::move(shape), rng); }

}  // namespace

TEST_CASE("sum of squares: value and gradient") {
    Tape tape;
    NodeId x = tape.leaf(Tensor::from({1.0, 2.0}), true, "x");
    NodeId y = tape.sum_all(tape.square(x));
    tape.backward(y);
    REQUIRE(tape.value(y).item() == 5.0);
    Tensor g = tape.grad(x);
    REQUIRE(g[0] == 2.0);
    REQUIRE(g[1] == 4.0);
}

TEST_CASE("stopgrad blocks exactly one factor") {
    Tape tape;
    NodeId x = tape.leaf(Tensor::from({3.0}), true, "x");
    NodeId y = tape.sum_all(tape.mul(tape.stop_grad(x), x));
    tape.backward(y);
    REQUIRE(tape.value(y).item() == 9.0);
    REQUIRE(tape.grad(x)[0] == 3.0);  // only the non-stopped factor contributes
}

TEST_CASE("gradient through a pure stopgrad path is exactly zero") {
    Tape tape;
    NodeId x = tape.leaf(Tensor::from({2.0, -1.0}), true, "x");
    NodeId y = tape.sum_all(tape.square(tape.stop_grad(x)));
    tape.backward(y);
    Tensor g = tape.grad(x);
    REQUIRE(g[0] == 0.0);
    REQUIRE(g[1] == 0.0);
}

TEST_CASE("linear layer gradient is exact") {
    RngStream rng(1, "linear");
    NamedTensors point{{"W", randt({3, 4}, rng)}, {"x", randt({2, 3}, rng)}};
    double err = grad_check(
        [](Tape& t, const NamedTensors& p) {
            NodeId W = t.leaf(p.at("W"), true, "W");
            NodeId x = t.leaf(p.at("x"), true, "x");
            GraphOutputs g;
            g.objective = t.sum_all(t.matmul(x, W));
            return g;
        },
        point, 1e-5);
    REQUIRE(err < 1e-8);
}

TEST_CASE("every primitive passes a finite-difference check") {
    RngStream rng(2, "prims");

    struct Case {
        const char* name;
        GraphFn fn;
        NamedTensors point;
    };
    std::vector<Case> cases;

    auto unary_case = [&](const char* name, auto apply, Shape out_shape = {3, 5}) {
        cases.push_back({name,
                         [apply](Tape& t, const NamedTensors& p) {
                             NodeId x = t.leaf(p.at("x"), true, "x");
                             GraphOutputs g;
                             g.objective = t.mse(apply(t, x), t.constant(p.at("target")));
                             return g;
                         },
                         {{"x", randt({3, 5}, rng)}, {"target", randt(out_shape, rng)}}});
    };

    unary_case("silu", [](Tape& t, NodeId x) { return t.silu(x); });
    unary_case("gelu", [](Tape& t, NodeId x) { return t.gelu(x); });
    unary_case("tanh", [](Tape& t, NodeId x) { return t.tanh_(x); });
    unary_case("exp", [](Tape& t, NodeId x) { return t.exp_(x); });
    unary_case("square", [](Tape& t, NodeId x) { return t.square(x); });
    unary_case("layer_norm", [](Tape& t, NodeId x) { return t.layer_norm(x); });
    unary_case("softmax_rows", [](Tape& t, NodeId x) { return t.softmax_rows(x); });
    unary_case("affine", [](Tape& t, NodeId x) { return t.affine(x, 1.7, -0.3); });
    unary_case("slice_rows", [](Tape& t, NodeId x) { return t.concat_rows({t.slice_rows(x, 1, 3), t.slice_rows(x, 0, 2)}); }, {4, 5});
    unary_case("slice_cols", [](Tape& t, NodeId x) { return t.concat_cols({t.slice_cols(x, 2, 5), t.slice_cols(x, 0, 3)}); }, {3, 6});
    unary_case("gather_rows", [](Tape& t, NodeId x) { return t.gather_rows(x, {2, 0, 2, 1, 2}); }, {5, 5});

    for (auto [ta, tb] : {std::pair{false, false}, {false, true}, {true, false}, {true, true}}) {
        cases.push_back({"matmul",
                         [ta, tb](Tape& t, const NamedTensors& p) {
                             NodeId a = t.leaf(p.at("a"), true, "a");
                             NodeId b = t.leaf(p.at("b"), true, "b");
                             GraphOutputs g;
                             g.objective = t.mse(t.matmul(a, b, ta, tb), t.constant(p.at("target")));
                             return g;
                         },
                         {{"a", randt(ta ? Shape{4, 3} : Shape{3, 4}, rng)},
                          {"b", randt(tb ? Shape{5, 4} : Shape{4, 5}, rng)},
                          {"target", randt({3, 5}, rng)}}});
    }

    cases.push_back({"add/sub/mul/add_rowvec/mean",
                     [](Tape& t, const NamedTensors& p) {
                         NodeId a = t.leaf(p.at("a"), true, "a");
                         NodeId b = t.leaf(p.at("b"), true, "b");
                         NodeId v = t.leaf(p.at("v"), true, "v");
                         NodeId z = t.mul(t.add(a, b), t.sub(a, b));
                         GraphOutputs g;
                         g.objective = t.mean_all(t.square(t.add_rowvec(z, v)));
                         return g;
                     },
                     {{"a", randt({4, 6}, rng)}, {"b", randt({4, 6}, rng)}, {"v", randt({6}, rng)}}});

    cases.push_back({"mul_rowvec",
                     [](Tape& t, const NamedTensors& p) {
                         NodeId a = t.leaf(p.at("a"), true, "a");
                         NodeId v = t.leaf(p.at("v"), true, "v");
                         GraphOutputs g;
                         g.objective = t.mean_all(t.square(t.mul_rowvec(a, v)));
                         return g;
                     },
                     {{"a", randt({4, 6}, rng)}, {"v", randt({6}, rng)}}});

    cases.push_back({"mse-both-sides",
                     [](Tape& t, const NamedTensors& p) {
                         NodeId a = t.leaf(p.at("a"), true, "a");
                         NodeId b = t.leaf(p.at("b"), true, "b");
                         GraphOutputs g;
                         g.objective = t.mse(t.silu(a), t.tanh_(b));
                         return g;
                     },
                     {{"a", randt({2, 7}, rng)}, {"b", randt({2, 7}, rng)}}});

    for (auto& c : cases) {
        INFO(c.name);
        REQUIRE(grad_check(c.fn, c.point, 1e-5) < 1e-4);
    }
}

TEST_CASE("two-layer MLP matches finite differences") {
    RngStream rng(3, "mlp");
    NamedTensors point{
        {"x", randt({2, 4}, rng)},      {"W1", randt({4, 8}, rng)}, {"b1", randt({8}, rng)},
        {"W2", randt({8, 3}, rng)},     {"b2", randt({3}, rng)},    {"target", randt({2, 3}, rng)},
    };
    GraphFn mlp = [](Tape& t, const NamedTensors& p) {
        NodeId x = t.leaf(p.at("x"), true, "x");
        NodeId h = t.silu(t.add_rowvec(t.matmul(x, t.leaf(p.at("W1"), true, "W1")), t.leaf(p.at("b1"), true, "b1")));
        NodeId y = t.add_rowvec(t.matmul(h, t.leaf(p.at("W2"), true, "W2")), t.leaf(p.at("b2"), true, "b2"));
        GraphOutputs g;
        g.objective = t.mse(y, t.constant(p.at("target")));
        g.outputs.emplace_back("y", y);
        return g;
    };
    REQUIRE(grad_check(mlp, point, 1e-5) < 1e-4);
}

TEST_CASE("softmax attention block matches finite differences") {
    RngStream rng(4, "attn");
    const int64_t L = 5, D = 8, H = 2, Dh = D / H;
    NamedTensors point{
        {"x", randt({L, D}, rng)},  {"Wq", randt({D, D}, rng)}, {"Wk", randt({D, D}, rng)},
        {"Wv", randt({D, D}, rng)}, {"Wo", randt({D, D}, rng)}, {"target", randt({L, D}, rng)},
    };
    GraphFn attn = [=](Tape& t, const NamedTensors& p) {
        NodeId x = t.leaf(p.at("x"), true, "x");
        NodeId q = t.matmul(x, t.leaf(p.at("Wq"), true, "Wq"));
        NodeId k = t.matmul(x, t.leaf(p.at("Wk"), true, "Wk"));
        NodeId v = t.matmul(x, t.leaf(p.at("Wv"), true, "Wv"));
        std::vector<NodeId> heads;
        for (int64_t h = 0; h < H; ++h) {
            NodeId qh = t.slice_cols(q, h * Dh, (h + 1) * Dh);
            NodeId kh = t.slice_cols(k, h * Dh, (h + 1) * Dh);
            NodeId vh = t.slice_cols(v, h * Dh, (h + 1) * Dh);
            NodeId scores = t.scale(t.matmul(qh, kh, false, true), 1.0 / std::sqrt(double(Dh)));
            heads.push_back(t.matmul(t.softmax_rows(scores), vh));
        }
        NodeId out = t.matmul(t.concat_cols(std::span<const NodeId>(heads.data(), heads.size())),
                              t.leaf(p.at("Wo"), true, "Wo"));
        GraphOutputs g;
        g.objective = t.mse(out, t.constant(p.at("target")));
        return g;
    };
    REQUIRE(grad_check(attn, point, 1e-5) < 1e-4);
}

TEST_CASE("layernorm of a constant row stays finite") {
    Tape tape;
    NodeId x = tape.leaf(Tensor::full({2, 8}, 3.5), true, "x");
    NodeId y = tape.layer_norm(x);
    tape.backward(tape.sum_all(tape.square(y)));
    REQUIRE(tape.value(y).all_finite());
    for (int64_t i = 0; i < 16; ++i) REQUIRE(tape.value(y)[i] == 0.0);
    REQUIRE(tape.grad(x).all_finite());
}

TEST_CASE("forward_backward is deterministic") {
    RngStream rng(5, "det");
    NamedTensors point{{"x", randt({4, 4}, rng)}, {"W", randt({4, 4}, rng)}};
    GraphFn fn = [](Tape& t, const NamedTensors& p) {
        NodeId x = t.leaf(p.at("x"), true, "x");
        NodeId W = t.leaf(p.at("W"), true, "W");
        GraphOutputs g;
        g.objective = t.mean_all(t.gelu(t.matmul(t.layer_norm(x), W)));
        return g;
    };
    auto r1 = forward_backward(fn, point);
    auto r2 = forward_backward(fn, point);
    REQUIRE(std::memcmp(&r1.objective, &r2.objective, sizeof(double)) == 0);
    for (auto& [name, g] : r1.grads)
        REQUIRE(std::memcmp(g.data(), r2.grads.at(name).data(), size_t(g.numel()) * sizeof(double)) == 0);
}

TEST_CASE("shape mismatch raises a structured error naming the op") {
    Tape tape;
    NodeId a = tape.leaf(Tensor({2, 3}));
    NodeId b = tape.leaf(Tensor({4, 5}));
    REQUIRE_THROWS_MATCHES(tape.matmul(a, b), ShapeError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("matmul")));
    REQUIRE_THROWS_AS(tape.add(a, b), ShapeError);
}

TEST_CASE("non-finite forward value raises an error naming the node") {
    Tape tape;
    NodeId x = tape.leaf(Tensor::from({800.0}), true, "x");
    REQUIRE_THROWS_MATCHES(tape.exp_(x), NonFiniteError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("exp")));
}

TEST_CASE("non-scalar objective is rejected") {
    Tape tape;
    NodeId x = tape.leaf(Tensor({2, 2}), true, "x");
    REQUIRE_THROWS_AS(tape.backward(tape.square(x)), ShapeError);
}

TEST_CASE("a corrupted backward rule is caught by the checker") {
    RngStream rng(6, "corrupt");
    NamedTensors point{{"a", randt({3, 3}, rng)}, {"b", randt({3, 3}, rng)}};
    GraphFn fn = [](Tape& t, const NamedTensors& p) {
        t.corrupt_matmul_backward = true;
        NodeId a = t.leaf(p.at("a"), true, "a");
        NodeId b = t.leaf(p.at("b"), true, "b");
        GraphOutputs g;
        g.objective = t.sum_all(t.square(t.matmul(a, b)));
        return g;
    };
    REQUIRE(grad_check(fn, point, 1e-5) > 1e-4);
}

TEST_CASE("float instantiation of the tape works") {
    TapeT<float> tape;
    auto x = tape.leaf(TensorT<float>({2, 2}, {1.f, 2.f, 3.f, 4.f}), true, "x");
    auto y = tape.sum_all(tape.square(x));
    tape.backward(y);
    REQUIRE(tape.value(y).item() == 30.f);
    REQUIRE(tape.grad(x)[3] == 8.f);
}

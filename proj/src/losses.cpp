#include <exprclone/error.hpp>
#include <exprclone/losses.hpp>

#include <cmath>

namespace exprclone {

nlohmann::json LossWeights::to_json() const
{
    return {{"v", v}, {"n", n}, {"g", g}, {"bp", bp}, {"br", br}, {"nll", nll}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j)
{
    LossWeights w;
    w.v = j.value("v", w.v);
    w.n = j.value("n", w.n);
    w.g = j.value("g", w.g);
    w.bp = j.value("bp", w.bp);
    w.br = j.value("br", w.br);
    w.nll = j.value("nll", w.nll);
    w.validate();
    return w;
}

void LossWeights::validate() const
{
    for (double x : {v, n, g, bp, br, nll}) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidInput("loss weights must be finite and nonnegative");
    }
}

DecoderLoss loss_decoder(const Vertices& pred, const Vertices& gt, const Mesh& rest, const DeformationFrames& frames,
                         const LossWeights& weights, Vertices* grad_pred)
{
    const Eigen::Index n = rest.num_vertices();
    if (pred.rows() != n || gt.rows() != n) {
        throw InvalidInput("decoder loss: prediction has " + std::to_string(pred.rows()) + " rows, ground truth " +
                           std::to_string(gt.rows()) + ", rest mesh " + std::to_string(n));
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    DecoderLoss out;

    const Vertices dv = pred - gt;
    out.v = dv.squaredNorm() * inv_n;

    const Vertices pn = vertex_normals(pred, rest.faces());
    const Vertices dn = pn - vertex_normals(gt, rest.faces());
    out.n = dn.squaredNorm() * inv_n;

    const Jacobians jp = frames.jacobians(pred);
    const Jacobians jg = frames.jacobians(gt);
    const double inv_f = 1.0 / static_cast<double>(jp.size());
    Jacobians dj(jp.size());
    for (std::size_t f = 0; f < jp.size(); ++f) {
        dj[f] = jp[f] - jg[f];
        out.g += dj[f].squaredNorm();
    }
    out.g *= inv_f;
    out.total = weights.v * out.v + weights.n * out.n + weights.g * out.g;

    if (grad_pred != nullptr) {
        *grad_pred = (2.0 * weights.v * inv_n) * dv;
        *grad_pred += vertex_normals_backward(pred, rest.faces(), (2.0 * weights.n * inv_n) * dn);
        for (auto& m : dj) m *= 2.0 * weights.g * inv_f;
        *grad_pred += frames.backward(pred, dj);
    }
    return out;
}

DecoderLoss loss_decoder(const Vertices& pred, const Vertices& gt, const Mesh& rest, const LossWeights& weights)
{
    return loss_decoder(pred, gt, rest, DeformationFrames(rest), weights, nullptr);
}

double loss_code(const Eigen::VectorXd& z, const Eigen::VectorXd& gt, Eigen::VectorXd* grad)
{
    const Eigen::Index s = gt.size();
    if (s < 1 || s > z.size()) {
        throw InvalidInput("code loss: ground truth has " + std::to_string(s) + " entries for a code of " +
                           std::to_string(z.size()));
    }
    const Eigen::Index e = z.size() - s;
    const Eigen::VectorXd d = z.head(s) - gt;
    double value = d.squaredNorm() / static_cast<double>(s);
    if (e > 0) value += z.tail(e).squaredNorm() / static_cast<double>(e);
    if (grad != nullptr) {
        grad->resize(z.size());
        grad->head(s) = (2.0 / static_cast<double>(s)) * d;
        if (e > 0) grad->tail(e) = (2.0 / static_cast<double>(e)) * z.tail(e);
    }
    return value;
}

double loss_identity(const Eigen::VectorXd& z_id, const Eigen::VectorXd& w_id_gt, Eigen::VectorXd* grad)
{
    return loss_code(z_id, w_id_gt, grad);
}

double loss_expression(const Eigen::VectorXd& z_ge, const Eigen::VectorXd& w_exp_gt, Eigen::VectorXd* grad)
{
    return loss_code(z_ge, w_exp_gt, grad);
}

double loss_reg(const Eigen::VectorXd& z, Eigen::VectorXd* grad)
{
    if (z.size() == 0) throw InvalidInput("loss_reg needs a nonempty code");
    const double inv = 1.0 / static_cast<double>(z.size());
    double sum = 0.0;
    if (grad != nullptr) grad->setZero(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double x = z[i];
        if (x < 0.0) {
            sum += -x;
            if (grad != nullptr) (*grad)[i] = -inv;
        } else if (x > 1.0) {
            sum += x - 1.0;
            if (grad != nullptr) (*grad)[i] = inv;
        }
    }
    return sum * inv;
}

double loss_bp(const Eigen::VectorXd& z_ge, const Eigen::VectorXd& w_exp_gt, const Eigen::MatrixXd& basis,
               Eigen::VectorXd* grad)
{
    const Eigen::Index k = basis.cols();
    if (w_exp_gt.size() != k || z_ge.size() < k || basis.rows() % 3 != 0) {
        throw InvalidInput("loss_bp: basis has " + std::to_string(k) + " columns, ground truth " +
                           std::to_string(w_exp_gt.size()) + " entries, code " + std::to_string(z_ge.size()));
    }
    const double n = static_cast<double>(basis.rows() / 3);
    const Eigen::VectorXd diff = basis * (z_ge.head(k) - w_exp_gt);
    if (grad != nullptr) {
        grad->setZero(z_ge.size());
        grad->head(k) = (2.0 / n) * (basis.transpose() * diff);
    }
    return diff.squaredNorm() / n;
}

double loss_br(const Eigen::VectorXd& z_ge, const Eigen::MatrixXd& displacement, const Eigen::MatrixXd& basis,
               Eigen::MatrixXd* grad_displacement)
{
    const Eigen::Index k = basis.cols();
    const Eigen::Index n = displacement.rows();
    if (z_ge.size() < k || displacement.cols() != 3 || basis.rows() != 3 * n) {
        throw InvalidInput("loss_br: basis rows " + std::to_string(basis.rows()) + " do not match " +
                           std::to_string(n) + " displaced vertices");
    }
    const Eigen::VectorXd target = basis * z_ge.head(k);
    const Eigen::MatrixXd target_rows =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>(target.data(), n, 3);
    const Eigen::MatrixXd diff = displacement - target_rows;
    if (grad_displacement != nullptr) *grad_displacement = (2.0 / static_cast<double>(n)) * diff;
    return diff.squaredNorm() / static_cast<double>(n);
}

std::string to_string(NllMode mode)
{
    return mode == NllMode::bernoulli ? "bernoulli" : "categorical";
}

NllMode nll_mode_from_string(const std::string& s)
{
    if (s == "bernoulli") return NllMode::bernoulli;
    if (s == "categorical") return NllMode::categorical;
    throw InvalidInput("unknown nll mode '" + s + "' (expected bernoulli or categorical)");
}

double loss_nll(const SkinningField& field, const std::vector<int>& labels, NllMode mode, Eigen::MatrixXd* grad_logits)
{
    const Eigen::Index n = field.probabilities.rows();
    const Eigen::Index l = field.probabilities.cols();
    if (static_cast<Eigen::Index>(labels.size()) != n) {
        throw InvalidInput("loss_nll: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                           " vertices");
    }
    for (int y : labels) {
        if (y < 0 || y >= l) throw InvalidInput("loss_nll: label " + std::to_string(y) + " outside [0, " + std::to_string(l) + ")");
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    double sum = 0.0;
    if (mode == NllMode::bernoulli) {
        Eigen::MatrixXd g_p;
        if (grad_logits != nullptr) g_p.resize(n, l);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index c = 0; c < l; ++c) {
                const double p = field.probabilities(i, c);
                const bool y = labels[static_cast<std::size_t>(i)] == c;
                sum -= y ? std::log(p) : std::log1p(-p);
                if (grad_logits != nullptr) g_p(i, c) = -inv_n * (y ? 1.0 / p : -1.0 / (1.0 - p));
            }
        }
        if (grad_logits != nullptr) *grad_logits = field.logits_gradient(g_p);
        return sum * inv_n;
    }
    if (grad_logits != nullptr) grad_logits->resize(n, l);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = field.logits.row(i);
        const double mx = row.maxCoeff();
        const Eigen::RowVectorXd e = (row.array() - mx).exp();
        const double z = e.sum();
        const int y = labels[static_cast<std::size_t>(i)];
        sum -= row[y] - mx - std::log(z);
        if (grad_logits != nullptr) {
            grad_logits->row(i) = (inv_n / z) * e;
            (*grad_logits)(i, y) -= inv_n;
        }
    }
    return sum * inv_n;
}

std::string to_string(Branch branch)
{
    return branch == Branch::ict ? "ict" : "non-ict";
}

nlohmann::json LossReport::to_json() const
{
    nlohmann::json j = terms;
    j["branch"] = to_string(branch);
    return j;
}

LossReport loss_total(const LossTerms& t, Branch branch, const LossWeights& w)
{
    LossReport r;
    r.branch = branch;
    r.terms["L_v"] = t.dec.v;
    r.terms["L_n"] = t.dec.n;
    r.terms["L_g"] = t.dec.g;
    r.terms["L_dec"] = t.dec.total;
    double total = t.dec.total;
    if (branch == Branch::ict) {
        if (!t.identity || !t.expression) throw InvalidInput("ict branch requires identity and expression ground truth");
        r.terms["L_ID"] = *t.identity;
        r.terms["L_Exp"] = *t.expression;
        total += *t.expression + *t.identity;
        if (t.bp) {
            r.terms["L_BP"] = *t.bp;
            total += w.bp * *t.bp;
        }
        if (t.br) {
            r.terms["L_BR"] = *t.br;
            total += w.br * *t.br;
        }
        if (t.nll) {
            r.terms["L_nll"] = *t.nll;
            total += w.nll * *t.nll;
        }
    } else {
        if (!t.reg_expression || !t.reg_identity) throw InvalidInput("non-ict branch requires both regularizer terms");
        r.terms["L_reg"] = *t.reg_expression + *t.reg_identity;
        total += *t.reg_expression + *t.reg_identity;
    }
    r.terms["L_total"] = total;
    return r;
}

std::map<std::string, double> average_terms(const std::vector<LossReport>& reports)
{
    std::map<std::string, double> sum;
    std::map<std::string, int> count;
    for (const auto& r : reports) {
        for (const auto& [k, v] : r.terms) {
            sum[k] += v;
            ++count[k];
        }
    }
    for (auto& [k, v] : sum) v /= count[k];
    return sum;
}

} // namespace exprclone

use serde::Serialize;

/// Every function the DSL knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builtin {
    // vocab axis: matrix -> sequence
    SumV,
    MaxV,
    Max2V,
    EntropyV,
    RenyiV,
    // elementwise: preserves shape
    Abs,
    Log,
    Exp,
    Relu,
    Pow,
    Clamp,
    // sequence -> sequence
    Diff,
    Gradient,
    DropLast,
    // sequence -> scalar
    Mean,
    Sum,
    Var,
    Std,
    Min,
    Max,
    Skew,
    Kurt,
    MinKMean,
    MaxKMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinClass {
    VocabAxis,
    Elementwise,
    Sequence,
    Reduction,
}

/// One row of the machine-readable builtin table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuiltinInfo {
    pub name: &'static str,
    pub signature: &'static str,
    pub class: BuiltinClass,
    /// Passes over the vocabulary axis.
    pub vocab_passes: u32,
    pub description: &'static str,
    /// A program exercising the builtin.
    pub example: &'static str,
}

impl Builtin {
    pub const ALL: [Builtin; 24] = [
        Builtin::SumV,
        Builtin::MaxV,
        Builtin::Max2V,
        Builtin::EntropyV,
        Builtin::RenyiV,
        Builtin::Abs,
        Builtin::Log,
        Builtin::Exp,
        Builtin::Relu,
        Builtin::Pow,
        Builtin::Clamp,
        Builtin::Diff,
        Builtin::Gradient,
        Builtin::DropLast,
        Builtin::Mean,
        Builtin::Sum,
        Builtin::Var,
        Builtin::Std,
        Builtin::Min,
        Builtin::Max,
        Builtin::Skew,
        Builtin::Kurt,
        Builtin::MinKMean,
        Builtin::MaxKMean,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|b| b.name() == name)
    }

    pub fn name(self) -> &'static str {
        self.info().name
    }

    pub fn class(self) -> BuiltinClass {
        self.info().class
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::RenyiV | Builtin::Pow | Builtin::MinKMean | Builtin::MaxKMean => 2,
            Builtin::Clamp => 3,
            _ => 1,
        }
    }

    pub fn info(self) -> BuiltinInfo {
        use BuiltinClass::*;
        let (name, signature, class, description, example) = match self {
            Builtin::SumV => ("sum_v", "sum_v(matrix) -> seq", VocabAxis,
                "sum over the vocabulary at each position", "mean(sum_v(P))"),
            Builtin::MaxV => ("max_v", "max_v(matrix) -> seq", VocabAxis,
                "largest vocabulary entry at each position", "mean(max_v(LP))"),
            Builtin::Max2V => ("max2_v", "max2_v(matrix) -> seq", VocabAxis,
                "second largest vocabulary entry at each position", "mean(max_v(LP) - max2_v(LP))"),
            Builtin::EntropyV => ("entropy_v", "entropy_v(matrix) -> seq", VocabAxis,
                "Shannon entropy -sum p log p of each row (0 log 0 = 0)", "mean(entropy_v(P))"),
            Builtin::RenyiV => ("renyi_v", "renyi_v(matrix, alpha: literal > 0 or inf) -> seq", VocabAxis,
                "Rényi entropy log(sum p^alpha)/(1-alpha) of each row; alpha=1 is Shannon, inf is -log max p",
                "max_k_mean(renyi_v(P, 2), 10)"),
            Builtin::Abs => ("abs", "abs(x) -> same shape", Elementwise,
                "absolute value", "mean(abs(diff(TLP)))"),
            Builtin::Log => ("log", "log(x) -> same shape", Elementwise,
                "natural logarithm", "mean(log(1 - TP))"),
            Builtin::Exp => ("exp", "exp(x) -> same shape", Elementwise,
                "exponential", "exp(-mean(TLP))"),
            Builtin::Relu => ("relu", "relu(x) -> same shape", Elementwise,
                "max(x, 0)", "mean(relu(max_v(LP) - TLP))"),
            Builtin::Pow => ("pow", "pow(x, c: literal) -> same shape", Elementwise,
                "x raised to a constant power", "mean(pow(TP, 0.5))"),
            Builtin::Clamp => ("clamp", "clamp(x, lo: literal, hi: literal) -> same shape", Elementwise,
                "limit to [lo, hi]", "mean(clamp(TLP, -10, 0))"),
            Builtin::Diff => ("diff", "diff(seq) -> seq (one shorter)", Sequence,
                "forward differences x[i+1] - x[i]", "std(diff(TLP))"),
            Builtin::Gradient => ("gradient", "gradient(seq) -> seq", Sequence,
                "central differences inside, one-sided at both ends", "mean(abs(gradient(TLP)))"),
            Builtin::DropLast => ("drop_last", "drop_last(seq) -> seq (one shorter)", Sequence,
                "drop the final position", "mean(drop_last(TLP))"),
            Builtin::Mean => ("mean", "mean(seq) -> scalar", Reduction,
                "arithmetic mean", "mean(TLP)"),
            Builtin::Sum => ("sum", "sum(seq) -> scalar", Reduction,
                "sum", "sum(TLP)"),
            Builtin::Var => ("var", "var(seq) -> scalar", Reduction,
                "population variance", "var(TLP)"),
            Builtin::Std => ("std", "std(seq) -> scalar", Reduction,
                "population standard deviation", "std(TLP)"),
            Builtin::Min => ("min", "min(seq) -> scalar", Reduction,
                "minimum", "min(TLP)"),
            Builtin::Max => ("max", "max(seq) -> scalar", Reduction,
                "maximum", "max(TLP)"),
            Builtin::Skew => ("skew", "skew(seq) -> scalar", Reduction,
                "sample skewness m3 / m2^1.5", "skew(TLP)"),
            Builtin::Kurt => ("kurt", "kurt(seq) -> scalar", Reduction,
                "excess kurtosis m4 / m2^2 - 3", "kurt(TLP)"),
            Builtin::MinKMean => ("min_k_mean", "min_k_mean(seq, k: literal in [0,100]) -> scalar", Reduction,
                "mean of the lowest k% values (at least one)", "min_k_mean(TLP, 20)"),
            Builtin::MaxKMean => ("max_k_mean", "max_k_mean(seq, k: literal in [0,100]) -> scalar", Reduction,
                "mean of the highest k% values (at least one)", "max_k_mean(entropy_v(P), 10)"),
        };
        BuiltinInfo {
            name,
            signature,
            class,
            vocab_passes: u32::from(class == VocabAxis),
            description,
            example,
        }
    }
}

/// The builtin table in a stable order.
pub fn builtin_reference() -> Vec<BuiltinInfo> {
    Builtin::ALL.iter().map(|b| b.info()).collect()
}

/// Plain-text rendering of the builtin table for prompts.
pub fn builtin_reference_text() -> String {
    let mut out = String::new();
    for info in builtin_reference() {
        out.push_str(&format!(
            "- {} [{}, vocab passes {}]: {}. e.g. `{}`\n",
            info.signature,
            match info.class {
                BuiltinClass::VocabAxis => "vocab-axis",
                BuiltinClass::Elementwise => "elementwise",
                BuiltinClass::Sequence => "sequence",
                BuiltinClass::Reduction => "reduction",
            },
            info.vocab_passes,
            info.description,
            info.example
        ));
    }
    out
}

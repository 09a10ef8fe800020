//! Parses a scores file and reports MC1 and MC2 per item and overall.

use repflow::metrics::{format_scores, mc2, parse_scores, summarize};

const SCORES: &str = "\
capital-fr\tB:-0.4\tC:-0.4,-2.1\tI:-1.3,-3.0
boiling-pt\tB:-2.2\tC:-2.2\tI:-0.9,-4.5
moon-walk\tB:-1.0\tC:-1.0,-1.5\tI:-1.0
";

fn main() -> repflow::Result<()> {
    let items = parse_scores(SCORES)?;
    for item in &items {
        println!(
            "{:<12} mc1 hit {:<5} mc2 {:.4}",
            item.question_id,
            item.mc1_hit(),
            mc2(item)?
        );
    }
    let summary = summarize(&items)?;
    println!("mc1 {:.4}  mean mc2 {:.4}", summary.mc1, summary.mc2_mean);
    print!("{}", format_scores(&items));
    Ok(())
}

use roimt_core::reacq::CurveRow;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Line chart of missed non-diagnostic slices against q.
pub fn reacq_svg(rows: &[CurveRow]) -> String {
    let y_max = rows
        .iter()
        .flat_map(|r| [r.mean_missed, r.random_mean_missed])
        .fold(1.0f64, f64::max)
        .ceil();
    let (q_min, q_max) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.q), b.max(r.q)));
    let q_span = if q_max > q_min { q_max - q_min } else { 1.0 };
    let x = |q: f64| MARGIN + (q - q_min) / q_span * (W - 2.0 * MARGIN);
    let y = |v: f64| H - MARGIN - v / y_max * (H - 2.0 * MARGIN);
    let line = |f: &dyn Fn(&CurveRow) -> f64| {
        rows.iter().map(|r| format!("{:.1},{:.1}", x(r.q), y(f(r)))).collect::<Vec<_>>().join(" ")
    };

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    ));
    for r in rows {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x(r.q),
            H - MARGIN + 16.0,
            r.q
        ));
    }
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            MARGIN - 6.0,
            y(v) + 4.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">q</text>\n",
        W / 2.0,
        H - 10.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">missed N slices per stack</text>\n",
        H / 2.0,
        H / 2.0
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n",
        line(&|r| r.mean_missed)
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#888\" stroke-dasharray=\"5,4\" stroke-width=\"2\" points=\"{}\"/>\n",
        line(&|r| r.random_mean_missed)
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{MARGIN}\" fill=\"#1f77b4\">model</text>\n<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#888\">random</text>\n",
        W - MARGIN - 60.0,
        W - MARGIN - 60.0,
        MARGIN + 16.0
    ));
    s.push_str("</svg>\n");
    s
}

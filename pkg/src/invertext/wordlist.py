"""Fixed word list for the password generator (500 common lowercase words, 4-7 letters)."""

WORDS: tuple[str, ...] = tuple(
    """
    able about above adult after agent agree alarm album alien
    alive alone along amber angel angle angry ankle answer april
    arena argue artist aside audio august autumn avenue aware awful
    back bacon baker ball band bank basic basket beach beard
    beauty become bedroom begin being below bench bird birth blade
    blame blast blaze bless blind blond blood blue board body
    bold bone bonus book boots border bottle bounce boxer brain
    branch brand bread break bride bridge bright bring broken brown
    bubble bucket build bullet bunny burn butter buyer cabin cactus
    cake camera camp candle candy capital captain card career carpet
    carrot catch cattle cave celery center chain chair champ change
    charm chart cheap check cherry chess chicken chief chill choice
    circle city claim class clear clever click cliff climb close
    cloud coach coast cocoa coffee cold color comic copper corn
    corner couch count couple course cover coyote crab craft crane
    crazy cream creek crew crime crisp crowd crown crush crystal
    cupcake curve daddy daisy danger daring david dealer death decade
    deer denim depth design desk devil diamond dinner disco dollar
    dolphin donut door dove dragon dream dress drink drive drum
    dust eagle earth easter echo edge elbow elder empire empty
    energy engine entry equal escape essay exact exile extra fabric
    face faith falcon fancy farmer father fault feast fence fever
    fiber fifty fight finger fire fish flag flash fleet float
    flood floor fluid flute foggy forest fortune forum frame freedom
    friend frog fruit funny galaxy game garden garlic gecko gentle
    giant ginger giraffe glass globe glove goat golf goose grade
    grain grape grass great green group guard guest guide habit
    hammer hand harbor hardy hawk heart helmet hero highway hockey
    honey hope hotel house humor hunter iceberg icon image impact
    inside iron island jacket jaguar jelly jewel jolly journey juice
    jungle karma kayak kidney king knife koala ladder lady lamp
    laser laugh lava lawyer leader lemon liberty light limit lion
    little lizard local lock lonely lotus lunar lunch magnet major
    maple marble market master matrix medal melody memory mercy meteor
    middle milk minute mister mobile moment money monster month morning
    mother mount mouse muffin music mystery native nature needle nephew
    night ninja noodle north number ocean office olive onion opera
    orbit orchid owner oxygen pacific paint palace panel panic parade
    parent party pasta peach peanut pencil people perfect person piano
    picnic pirate pizza plant plasma player pocket poem polar police
    popcorn potato prince prism purple puzzle queen quick rabbit racer
    radio rain random ranger raven reader record remote rescue ribbon
    rider road robin rocket rose ruby rugby saddle safari salad
    salmon sandy santa sauce school scout season seven shadow shark
    shell sherry silver simple skate skull smile snake soccer socks
    soldier sonic spider spirit spring squid steel stone strong sugar
    summer super surfer sweet tango taxi teacher tennis thunder timber
    toast tomato tower tractor travel tribe trophy turbo turtle uncle
    unicorn union urban valley velvet venus video viking virgo vision
    volcano wagon water wealth wheel winter wolf wonder yellow zebra
    """.split()
)

assert len(WORDS) == 500
